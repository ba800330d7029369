//! C ABI for the detection pipeline: load a trained run directory into an
//! opaque detector handle, score raw pixel buffers, and threshold maps.
//! Every fallible call returns a status code; the detail message of the most
//! recent failure on the calling thread is available via
//! [`anomalens_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use anomalens::config::ExperimentConfig;
use anomalens::data::preprocess;
use anomalens::error::Error;
use anomalens::orchestrator::{self, detect_image};
use anomalens::pm::Measurer;

/// Status codes mirror the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalensStatus {
    Ok = 0,
    InvalidArgument = 1,
    ConfigError = 2,
    DataError = 3,
    ModelError = 4,
    Divergence = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', "?");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> AnomalensStatus {
    match err.exit_code() {
        2 => AnomalensStatus::ConfigError,
        3 => AnomalensStatus::DataError,
        4 => AnomalensStatus::ModelError,
        5 => AnomalensStatus::Divergence,
        _ => AnomalensStatus::InvalidArgument,
    }
}

/// Fully loaded inference pipeline (opaque to C).
pub struct AnomalensDetector {
    cfg: ExperimentConfig,
    ie: anomalens::ienet::IeNet,
    expert: Option<anomalens::expert::ExpertNet>,
    measurer: Measurer,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn anomalens_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Detail message of the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn anomalens_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn load_detector(config_path: &Path, run_dir: &Path) -> Result<AnomalensDetector, Error> {
    let cfg = ExperimentConfig::from_file(config_path)?;
    let ie = orchestrator::load_ie(&cfg, &orchestrator::ie_best_checkpoint(run_dir))?;
    let expert = if cfg.toggles.use_expert_net {
        Some(orchestrator::load_expert(
            &cfg,
            &orchestrator::expert_best_checkpoint(run_dir),
        )?)
    } else {
        None
    };
    let measurer = Measurer::new(&cfg.pm, cfg.image_size, true)?;
    Ok(AnomalensDetector {
        cfg,
        ie,
        expert,
        measurer,
    })
}

/// Load a detector from an experiment config and the run directory holding
/// its trained checkpoints. On success writes the handle into `out`.
///
/// # Safety
/// `config_path` and `run_dir` must be NUL-terminated strings; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn anomalens_detector_load(
    config_path: *const c_char,
    run_dir: *const c_char,
    out: *mut *mut AnomalensDetector,
) -> AnomalensStatus {
    if config_path.is_null() || run_dir.is_null() || out.is_null() {
        set_error("null argument");
        return AnomalensStatus::InvalidArgument;
    }
    let config_path = match CStr::from_ptr(config_path).to_str() {
        Ok(s) => PathBuf::from(s),
        Err(_) => {
            set_error("config_path is not valid UTF-8");
            return AnomalensStatus::InvalidArgument;
        }
    };
    let run_dir = match CStr::from_ptr(run_dir).to_str() {
        Ok(s) => PathBuf::from(s),
        Err(_) => {
            set_error("run_dir is not valid UTF-8");
            return AnomalensStatus::InvalidArgument;
        }
    };
    match load_detector(&config_path, &run_dir) {
        Ok(detector) => {
            *out = Box::into_raw(Box::new(detector));
            AnomalensStatus::Ok
        }
        Err(e) => {
            set_error(&format!("{}: {e}", e.category()));
            status_of(&e)
        }
    }
}

/// Release a detector handle. Accepts NULL.
///
/// # Safety
/// `detector` must be a handle produced by [`anomalens_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn anomalens_detector_free(detector: *mut AnomalensDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Side length of the square anomaly maps this detector emits.
///
/// # Safety
/// `detector` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn anomalens_detector_map_size(
    detector: *const AnomalensDetector,
) -> usize {
    if detector.is_null() {
        return 0;
    }
    (*detector).cfg.image_size
}

/// Score one image. `pixels` is row-major HWC with values in [0,1] and 1 or
/// 3 channels; any resolution is accepted and resized internally. Writes the
/// normalized anomaly map (`map_size * map_size` floats) into `out_map` and
/// the image-level score into `out_score` (either may be NULL to skip).
///
/// # Safety
/// `pixels` must hold `height * width * channels` floats; `out_map` must
/// hold `map_size * map_size` floats when non-NULL.
#[no_mangle]
pub unsafe extern "C" fn anomalens_detect(
    detector: *const AnomalensDetector,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    out_map: *mut f32,
    out_score: *mut f32,
) -> AnomalensStatus {
    if detector.is_null() || pixels.is_null() {
        set_error("null argument");
        return AnomalensStatus::InvalidArgument;
    }
    if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
        set_error("image must be non-empty with 1 or 3 channels");
        return AnomalensStatus::InvalidArgument;
    }
    let det = &*detector;
    let buffer = std::slice::from_raw_parts(pixels, height * width * channels);
    let raw = Array3::from_shape_fn((channels, height, width), |(c, y, x)| {
        f64::from(buffer[(y * width + x) * channels + c]).clamp(0.0, 1.0)
    });
    let result = preprocess::preprocess(&raw, det.cfg.image_size, det.cfg.channels)
        .and_then(|x| {
            detect_image(
                &det.cfg,
                &det.ie,
                det.expert.as_ref(),
                &det.measurer,
                &x,
                "ffi-detect",
            )
        });
    match result {
        Ok(output) => {
            if !out_map.is_null() {
                let size = det.cfg.image_size;
                let slot = std::slice::from_raw_parts_mut(out_map, size * size);
                for (dst, src) in slot.iter_mut().zip(output.map.normalized.iter()) {
                    *dst = *src as f32;
                }
            }
            if !out_score.is_null() {
                *out_score = output.score as f32;
            }
            AnomalensStatus::Ok
        }
        Err(e) => {
            set_error(&format!("{}: {e}", e.category()));
            status_of(&e)
        }
    }
}

/// Threshold a normalized map into a binary mask (strict `> alpha`).
///
/// # Safety
/// `map` and `out_mask` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn anomalens_segment(
    map: *const f32,
    len: usize,
    alpha: f32,
    out_mask: *mut u8,
) -> AnomalensStatus {
    if map.is_null() || out_mask.is_null() {
        set_error("null argument");
        return AnomalensStatus::InvalidArgument;
    }
    if !(0.0..=1.0).contains(&alpha) {
        set_error("alpha must lie in [0, 1]");
        return AnomalensStatus::ConfigError;
    }
    let map = std::slice::from_raw_parts(map, len);
    let mask = std::slice::from_raw_parts_mut(out_mask, len);
    for (dst, src) in mask.iter_mut().zip(map.iter()) {
        *dst = u8::from(*src > alpha);
    }
    AnomalensStatus::Ok
}
