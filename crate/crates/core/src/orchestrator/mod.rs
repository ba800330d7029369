//! End-to-end pipeline driver: dataset dispatch, the two training stages,
//! impression materialization, evaluation, detection, visualization, and the
//! ablation sweep. Each entry point locks its output directory.

pub mod ablate;
pub mod checkpoint;
pub mod evaluate;
pub mod impressions;
pub mod lock;
pub mod train;

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::config::{DataKind, ExperimentConfig};
use crate::data::{
    build_one_class_protocol, folder::load_folder_dataset, grid::load_grid_dataset,
    synth::{synth_defect_dataset, synth_digits_dataset, SynthDefectSpec, SynthDigitsSpec},
    DatasetHandle, Split,
};
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;

pub use ablate::{single_disabled_variants, table_variants, Variant, VariantResult};
pub use evaluate::{detect_image, detect_to_files, DetectionOutput};
pub use lock::RunLock;
pub use train::{load_expert, load_ie, RunLog, StageOutcome};

/// Resolve (train, test) handles for the configured dataset kind. Synthetic
/// kinds materialize their files under the configured root first (a
/// deterministic rewrite).
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(DatasetHandle, DatasetHandle)> {
    let root = PathBuf::from(&cfg.data.root);
    match cfg.data.kind {
        DataKind::Folder => {
            let train = load_folder_dataset(&root, Split::Train, cfg.image_size, cfg.channels)?;
            let test = load_folder_dataset(&root, Split::Test, cfg.image_size, cfg.channels)?;
            Ok((train, test))
        }
        DataKind::Grid => {
            let labeled = load_grid_dataset(&root, cfg.image_size, cfg.channels)?;
            build_one_class_protocol(&labeled, &cfg.data.normal_class)
        }
        DataKind::SynthDefect => synth_defect_dataset(
            &root,
            SynthDefectSpec {
                n_clean: cfg.data.synth_clean,
                n_defect: cfg.data.synth_defect,
                image_size: cfg.image_size,
                seed: cfg.seed,
            },
            cfg.channels,
        ),
        DataKind::SynthDigits => {
            synth_digits_dataset(
                &root,
                SynthDigitsSpec {
                    per_class_train: cfg.data.digits_train_per_class,
                    per_class_test: cfg.data.digits_test_per_class,
                    tile: cfg.data.digit_tile,
                    seed: cfg.seed,
                },
            )?;
            let labeled = load_grid_dataset(&root, cfg.image_size, cfg.channels)?;
            build_one_class_protocol(&labeled, &cfg.data.normal_class)
        }
    }
}

pub fn load_images(handle: &DatasetHandle) -> Result<Vec<Array3<f64>>> {
    let mut out = Vec::with_capacity(handle.len());
    for idx in 0..handle.len() {
        out.push(handle.load_image(idx)?.into_array());
    }
    Ok(out)
}

pub fn ie_best_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints").join("ie").join("best.ckpt")
}

pub fn expert_best_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints").join("expert").join("best.ckpt")
}

/// `prepare`: materialize synthetic data when configured and export the
/// line-delimited manifests of both splits.
pub fn cmd_prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let _lock = RunLock::acquire(out_dir)?;
    let (train, test) = load_datasets(cfg)?;
    for (name, handle) in [("train", &train), ("test", &test)] {
        let path = out_dir.join(format!("manifest_{name}.txt"));
        std::fs::write(&path, handle.manifest()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// `train-ie`: stage-one training on the anomaly-free train split.
pub fn cmd_train_ie(cfg: &ExperimentConfig, out_dir: &Path) -> Result<StageOutcome> {
    let _lock = RunLock::acquire(out_dir)?;
    let (train_set, _) = load_datasets(cfg)?;
    let images = load_images(&train_set)?;
    let log = RunLog::new(out_dir)?;
    train::train_ie_net(cfg, &images, out_dir, &log)
}

/// `impress`: materialize the impression set from the best stage-one
/// checkpoint.
pub fn cmd_impress(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<usize> {
    let _lock = RunLock::acquire(out_dir)?;
    let ckpt = ie_best_checkpoint(out_dir);
    let ie = load_ie(cfg, &ckpt)?;
    let (train_set, _) = load_datasets(cfg)?;
    let manifest = impressions::generate_impression_set(cfg, &ie, &ckpt, &train_set, out_dir, force)?;
    Ok(manifest.items.len())
}

/// `train-expert`: stage-two training on (image, impression) pairs.
pub fn cmd_train_expert(cfg: &ExperimentConfig, out_dir: &Path) -> Result<StageOutcome> {
    let _lock = RunLock::acquire(out_dir)?;
    let ckpt = ie_best_checkpoint(out_dir);
    let (train_set, _) = load_datasets(cfg)?;
    let images = load_images(&train_set)?;
    let imps = impressions::load_impressions(out_dir, &ckpt)?;
    let log = RunLog::new(out_dir)?;
    train::train_expert_net(cfg, &images, &imps, out_dir, &log)
}

/// `evaluate`: score the test split with the trained pipeline.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvaluationReport> {
    let _lock = RunLock::acquire(out_dir)?;
    let ie = load_ie(cfg, &ie_best_checkpoint(out_dir))?;
    let expert = if cfg.toggles.use_expert_net {
        Some(load_expert(cfg, &expert_best_checkpoint(out_dir))?)
    } else {
        None
    };
    let (_, test_set) = load_datasets(cfg)?;
    evaluate::evaluate(cfg, &ie, expert.as_ref(), &test_set, out_dir, &[])
}

/// `detect`: single-image artifacts (quadruple + mask + raw map).
pub fn cmd_detect(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    image_path: &Path,
) -> Result<Vec<PathBuf>> {
    let _lock = RunLock::acquire(out_dir)?;
    let ie = load_ie(cfg, &ie_best_checkpoint(out_dir))?;
    let expert = if cfg.toggles.use_expert_net {
        Some(load_expert(cfg, &expert_best_checkpoint(out_dir))?)
    } else {
        None
    };
    let detect_dir = out_dir.join("detect");
    detect_to_files(cfg, &ie, expert.as_ref(), image_path, &detect_dir)
}

/// `visualize`: qualitative gallery (input, impression, reconstruction,
/// naive impression, heatmap, mask) over the first test images.
pub fn cmd_visualize(cfg: &ExperimentConfig, out_dir: &Path, limit: usize) -> Result<PathBuf> {
    let _lock = RunLock::acquire(out_dir)?;
    let ie = load_ie(cfg, &ie_best_checkpoint(out_dir))?;
    let expert = if cfg.toggles.use_expert_net {
        Some(load_expert(cfg, &expert_best_checkpoint(out_dir))?)
    } else {
        None
    };
    let (_, test_set) = load_datasets(cfg)?;
    if test_set.is_empty() {
        return Err(Error::EmptyInput("test split"));
    }
    let measurer = crate::pm::Measurer::new(&cfg.pm, cfg.image_size, true)?;

    let mut rows = Vec::new();
    for idx in 0..test_set.len().min(limit) {
        let x = test_set.load_image(idx)?;
        let out = detect_image(
            cfg,
            &ie,
            expert.as_ref(),
            &measurer,
            &x,
            &format!("eval-noise-{idx}"),
        )?;
        let mut panels = vec![crate::viz::rgb_image(x.array())];
        panels.push(crate::viz::rgb_image(out.impression.array()));
        if let Some(xh) = &out.reconstruction {
            panels.push(crate::viz::rgb_image(xh.array()));
        }
        if let Some(mh) = &out.naive {
            panels.push(crate::viz::rgb_image(mh.array()));
        }
        panels.push(crate::viz::heatmap_image(&out.map.normalized));
        let mask_img = {
            let m = out.mask.mapv(|v| v);
            let mut chw = Array3::zeros((1, m.dim().0, m.dim().1));
            chw.index_axis_mut(ndarray::Axis(0), 0).assign(&m);
            crate::viz::rgb_image(&chw)
        };
        panels.push(mask_img);
        rows.push(crate::viz::compose_row(&panels));
    }
    let gallery = crate::viz::compose_gallery(&rows);
    let path = out_dir.join("gallery.png");
    crate::viz::save(gallery.into(), &path)?;
    Ok(path)
}

/// `ablate`: the published seven-row toggle sweep with a comparative report.
pub fn cmd_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<VariantResult>> {
    let _lock = RunLock::acquire(out_dir)?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let results = ablate::run_variants(cfg, &table_variants(), &train_set, &test_set, out_dir)?;
    ablate::write_comparison(&results, out_dir)?;
    Ok(results)
}
