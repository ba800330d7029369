use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by the whole pipeline. Every variant carries a stable
/// kebab-case category that the CLI prints on a single line and maps to an
/// exit code (0 success, 2 config, 3 data, 4 model, 5 divergence).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse failure: {0}")]
    ConfigParse(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid threshold {0}; alpha must lie in [0, 1]")]
    InvalidThreshold(f64),

    #[error("dataset root not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("dataset layout violation at {path}: {reason}")]
    LayoutViolation { path: PathBuf, reason: String },

    #[error("unknown class `{requested}`; labels present: {available:?}")]
    UnknownClass {
        requested: String,
        available: Vec<String>,
    },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("invalid item count: {0}")]
    InvalidCount(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("batch of {0} is too small; shuffled negatives need at least 2 items")]
    BatchTooSmall(usize),

    #[error("invalid moments: sigma must be strictly positive")]
    InvalidMoments,

    #[error("shape mismatch in {ctx}: expected {expected}, got {got}")]
    Shape {
        ctx: &'static str,
        expected: String,
        got: String,
    },

    #[error("paired sample shapes differ: {0}")]
    Pairing(String),

    #[error("model not ready: {0}")]
    ModelNotReady(String),

    #[error("checkpoint {path} does not match the active config: {reason}")]
    FingerprintMismatch { path: PathBuf, reason: String },

    #[error("impression set is stale: {0}")]
    StaleImpressions(String),

    #[error("backbone weights unavailable at {path} and fallback disabled")]
    BackboneUnavailable { path: PathBuf },

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },

    #[error("scores contain a single class; AuROC needs both labels")]
    DegenerateLabels,

    #[error("output directory {0} is locked by another run")]
    OutputLocked(PathBuf),

    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ConfigParse(_) => "config-parse-error",
            Error::UnknownConfigKey(_) => "unknown-config-key",
            Error::InvalidThreshold(_) => "invalid-threshold",
            Error::DatasetNotFound(_) => "dataset-not-found",
            Error::LayoutViolation { .. } => "layout-violation",
            Error::UnknownClass { .. } => "unknown-class",
            Error::Decode { .. } => "decode-error",
            Error::InvalidCount(_) => "invalid-count",
            Error::EmptyInput(_) => "empty-input",
            Error::BatchTooSmall(_) => "batch-too-small",
            Error::InvalidMoments => "invalid-moments",
            Error::Shape { .. } => "shape-error",
            Error::Pairing(_) => "pairing-error",
            Error::ModelNotReady(_) => "model-not-ready",
            Error::FingerprintMismatch { .. } => "fingerprint-mismatch",
            Error::StaleImpressions(_) => "stale-impressions",
            Error::BackboneUnavailable { .. } => "backbone-unavailable",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::DegenerateLabels => "degenerate-labels",
            Error::OutputLocked(_) => "output-locked",
            Error::Io { .. } => "io-error",
        }
    }

    /// CLI exit code: 0 success, 2 config, 3 data, 4 model, 5 divergence,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse(_) | Error::UnknownConfigKey(_) | Error::InvalidThreshold(_) => 2,
            Error::DatasetNotFound(_)
            | Error::LayoutViolation { .. }
            | Error::UnknownClass { .. }
            | Error::Decode { .. }
            | Error::InvalidCount(_)
            | Error::EmptyInput(_)
            | Error::BatchTooSmall(_)
            | Error::DegenerateLabels => 3,
            Error::InvalidMoments
            | Error::Shape { .. }
            | Error::Pairing(_)
            | Error::ModelNotReady(_)
            | Error::FingerprintMismatch { .. }
            | Error::StaleImpressions(_)
            | Error::BackboneUnavailable { .. } => 4,
            Error::TrainingDiverged { .. } => 5,
            Error::OutputLocked(_) | Error::Io { .. } => 1,
        }
    }
}
