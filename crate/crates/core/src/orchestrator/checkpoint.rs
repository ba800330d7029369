//! Versioned binary checkpoints: a JSON header (kind, fingerprints, step,
//! tensor index) followed by raw little-endian f64 tensor data. Loading
//! refuses checkpoints whose image size or model fingerprint disagrees with
//! the active config.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"ANLCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// "ie" or "expert".
    pub kind: String,
    pub model_fingerprint: String,
    pub image_size: usize,
    pub channels: usize,
    /// Global training step at save time.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn save(
    path: &Path,
    kind: &str,
    cfg: &ExperimentConfig,
    store: &ParamStore,
    step: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        version: 1,
        kind: kind.to_string(),
        model_fingerprint: cfg.model_fingerprint(kind),
        image_size: cfg.image_size,
        channels: cfg.channels,
        step,
        tensors: store
            .iter()
            .map(|(_, name, value)| TensorEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::with_capacity(header_json.len() + store.param_count() * 8 + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&store.byte_image());
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Load tensors by name, verifying kind and config compatibility.
pub fn load(
    path: &Path,
    expected_kind: &str,
    cfg: &ExperimentConfig,
) -> Result<(HashMap<String, Tensor>, CheckpointHeader)> {
    if !path.is_file() {
        return Err(Error::ModelNotReady(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::ModelNotReady(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::ModelNotReady(format!("corrupt checkpoint header: {e}")))?;

    if header.version != 1 {
        return Err(Error::ModelNotReady(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.kind != expected_kind {
        return Err(Error::ModelNotReady(format!(
            "checkpoint kind `{}`, wanted `{expected_kind}`",
            header.kind
        )));
    }
    if header.image_size != cfg.image_size || header.channels != cfg.channels {
        return Err(Error::FingerprintMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "trained at {}x{} ch{}, config wants {}x{} ch{}",
                header.image_size,
                header.image_size,
                header.channels,
                cfg.image_size,
                cfg.image_size,
                cfg.channels
            ),
        });
    }
    if header.model_fingerprint != cfg.model_fingerprint(expected_kind) {
        return Err(Error::FingerprintMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "model fingerprint {} != config fingerprint {}",
                header.model_fingerprint,
                cfg.model_fingerprint(expected_kind)
            ),
        });
    }

    let mut tensors = HashMap::new();
    let mut offset = 12 + header_len;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = offset + len * 8;
        if end > bytes.len() {
            return Err(Error::ModelNotReady(format!(
                "checkpoint {} truncated",
                path.display()
            )));
        }
        let values: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(
            entry.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values).unwrap(),
        );
        offset = end;
    }
    Ok((tensors, header))
}

/// Content hash of a checkpoint file; ties the impression set to the exact
/// stage-one weights that produced it.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest[..16].iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::ienet::IeNet;

    fn mini_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::small();
        cfg.image_size = 8;
        cfg.ie.blocks = 2;
        cfg.ie.base_width = 8;
        cfg.ie.d_z = 8;
        cfg.ie.t_hidden = 8;
        cfg
    }

    #[test]
    fn round_trip_restores_parameters() {
        let cfg = mini_cfg();
        let net = IeNet::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ie.ckpt");
        save(&path, "ie", &cfg, &net.store, 42).unwrap();

        let (tensors, header) = load(&path, "ie", &cfg).unwrap();
        assert_eq!(header.step, 42);
        let mut net2 = IeNet::new(&cfg);
        net2.store.load_from(&tensors).unwrap();
        assert_eq!(net.store.byte_image(), net2.store.byte_image());
    }

    #[test]
    fn refuses_wrong_image_size() {
        let cfg = mini_cfg();
        let net = IeNet::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ie.ckpt");
        save(&path, "ie", &cfg, &net.store, 1).unwrap();

        let mut other = mini_cfg();
        other.image_size = 16;
        let err = load(&path, "ie", &other).unwrap_err();
        assert_eq!(err.category(), "fingerprint-mismatch");
    }

    #[test]
    fn refuses_wrong_kind_and_missing_file() {
        let cfg = mini_cfg();
        let net = IeNet::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ie.ckpt");
        save(&path, "ie", &cfg, &net.store, 1).unwrap();
        assert_eq!(
            load(&path, "expert", &cfg).unwrap_err().category(),
            "model-not-ready"
        );
        assert_eq!(
            load(&dir.path().join("nope.ckpt"), "ie", &cfg)
                .unwrap_err()
                .category(),
            "model-not-ready"
        );
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let cfg = mini_cfg();
        let net = IeNet::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&a, "ie", &cfg, &net.store, 7).unwrap();
        save(&b, "ie", &cfg, &net.store, 7).unwrap();
        assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
    }
}
