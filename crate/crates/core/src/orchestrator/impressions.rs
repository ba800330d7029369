//! Materialized impression set: one array file per training image plus a
//! manifest binding the set to the exact stage-one checkpoint that produced
//! it.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::ienet::IeNet;

use super::checkpoint;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImpressionManifest {
    /// Content hash of the producing checkpoint file.
    pub checkpoint_fingerprint: String,
    pub items: Vec<ImpressionItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImpressionItem {
    pub source: String,
    pub file: String,
}

fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("impressions").join("manifest.json")
}

pub fn read_manifest(out_dir: &Path) -> Result<ImpressionManifest> {
    let path = manifest_path(out_dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::StaleImpressions(format!("corrupt manifest: {e}")))
}

/// Produce one impression per training image. Re-running against the same
/// checkpoint is a no-op; against a different checkpoint it fails with
/// `stale-impressions` unless `force` regenerates.
pub fn generate_impression_set(
    _cfg: &ExperimentConfig,
    ie: &IeNet,
    ie_ckpt: &Path,
    train: &DatasetHandle,
    out_dir: &Path,
    force: bool,
) -> Result<ImpressionManifest> {
    let fingerprint = checkpoint::content_hash(ie_ckpt)?;
    let dir = out_dir.join("impressions");
    let manifest_file = manifest_path(out_dir);

    if manifest_file.is_file() && !force {
        let existing = read_manifest(out_dir)?;
        if existing.checkpoint_fingerprint == fingerprint
            && existing.items.len() == train.len()
            && existing.items.iter().all(|i| dir.join(&i.file).is_file())
        {
            return Ok(existing);
        }
        if existing.checkpoint_fingerprint != fingerprint {
            return Err(Error::StaleImpressions(format!(
                "impressions were produced by checkpoint {}, current is {fingerprint}; \
                 regenerate with --force",
                existing.checkpoint_fingerprint
            )));
        }
    }

    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut items = Vec::with_capacity(train.len());
    for idx in 0..train.len() {
        let x = train.load_image(idx)?;
        let m = ie.extract_impression(&x)?;
        let file = format!("{idx:05}.npy");
        crate::npy::write_npy(&dir.join(&file), &m.array().clone().into_dyn())?;
        items.push(ImpressionItem {
            source: train.items()[idx].source.path_string(),
            file,
        });
    }
    let manifest = ImpressionManifest {
        checkpoint_fingerprint: fingerprint,
        items,
    };
    std::fs::write(
        &manifest_file,
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .map_err(|e| Error::io(&manifest_file, e))?;
    Ok(manifest)
}

/// Load the stored impressions, verifying they match the given checkpoint.
pub fn load_impressions(out_dir: &Path, ie_ckpt: &Path) -> Result<Vec<Array3<f64>>> {
    let manifest = read_manifest(out_dir)?;
    let fingerprint = checkpoint::content_hash(ie_ckpt)?;
    if manifest.checkpoint_fingerprint != fingerprint {
        return Err(Error::StaleImpressions(format!(
            "stored impressions match checkpoint {}, not {fingerprint}",
            manifest.checkpoint_fingerprint
        )));
    }
    let dir = out_dir.join("impressions");
    let mut out = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let arr = crate::npy::read_npy(&dir.join(&item.file))?;
        out.push(arr.into_dimensionality::<ndarray::Ix3>().map_err(|_| {
            Error::StaleImpressions(format!("impression {} is not 3-d", item.file))
        })?);
    }
    Ok(out)
}
