//! Two-stage reconstruction pipeline for unsupervised image anomaly
//! detection.
//!
//! Stage one distills an input image into an anomaly-free "impression";
//! stage two restores high-fidelity detail on top of it. A frozen perceptual
//! backbone then compares the four images (input, impression, high-fidelity
//! reconstruction, naive impression) to localize anomalies.

pub mod config;
pub mod data;
pub mod error;
pub mod expert;
pub mod ienet;
pub mod metrics;
pub mod nn;
pub mod npy;
pub mod orchestrator;
pub mod pm;
pub mod viz;

pub use error::{Error, Result};
