//! Evaluation over a test split: run the two-stage pipeline per image,
//! write map/mask artifacts, pool metrics per category, and assemble the
//! report. Also hosts single-image detection.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{DatasetHandle, ImageTensor};
use crate::error::{Error, Result};
use crate::expert::ExpertNet;
use crate::ienet::IeNet;
use crate::metrics::{aggregate_report, auroc, CategoryRecord, EvaluationReport};
use crate::nn::init;
use crate::pm::{image_score, segment, AnomalyMap, Measurer};
use crate::viz;

/// Pipeline products for one image.
pub struct DetectionOutput {
    pub impression: ImageTensor,
    pub reconstruction: Option<ImageTensor>,
    pub naive: Option<ImageTensor>,
    pub map: AnomalyMap,
    pub mask: ndarray::Array2<f64>,
    pub score: f64,
}

/// Run the full measurement pipeline on one preprocessed image.
/// `noise_seed` feeds the seeded Gaussian detail vector when detail guidance
/// is disabled.
pub fn detect_image(
    cfg: &ExperimentConfig,
    ie: &IeNet,
    expert: Option<&ExpertNet>,
    measurer: &Measurer,
    x: &ImageTensor,
    noise_seed: &str,
) -> Result<DetectionOutput> {
    let m = ie.extract_impression(x)?;

    let (x_hat, m_hat) = if cfg.toggles.use_expert_net {
        let expert = expert.ok_or_else(|| {
            Error::ModelNotReady("stage-two checkpoint required when the expert is enabled".into())
        })?;
        let s = if cfg.toggles.use_detail_guidance {
            expert.extract_details(x)?
        } else {
            let mut rng = init::rng_for(cfg.seed, noise_seed);
            Array1::from_shape_fn(expert.d_s(), |_| init::normal(&mut rng))
        };
        let x_hat = expert.reconstruct_high_fidelity(&m, &s)?;
        let m_hat = if cfg.toggles.use_naive_impression_term && expert.has_naive_branch() {
            Some(expert.naive_impression(x)?)
        } else {
            None
        };
        (Some(x_hat), m_hat)
    } else {
        (None, None)
    };

    let map = measurer.measure(x, x_hat.as_ref(), &m, m_hat.as_ref())?;
    let mask = segment(&map, cfg.pm.alpha)?;
    let score = image_score(&map, cfg.pm.topk_fraction);
    Ok(DetectionOutput {
        impression: m,
        reconstruction: x_hat,
        naive: m_hat,
        map,
        mask,
        score,
    })
}

#[derive(Debug, Serialize)]
struct PerImageRecord {
    index: usize,
    source: String,
    label: String,
    anomalous: bool,
    score: f64,
}

/// Evaluate a test split, writing `maps/`, `masks/`, `scores.csv`,
/// `report.json`, and `report.txt` under `out_dir`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    ie: &IeNet,
    expert: Option<&ExpertNet>,
    test: &DatasetHandle,
    out_dir: &Path,
    extra_notes: &[String],
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test split"));
    }
    let measurer = Measurer::new(&cfg.pm, cfg.image_size, true)?;

    let maps_dir = out_dir.join("maps");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut inter = 0usize;
    let mut union = 0usize;
    let mut any_gt_positive = false;
    let mut pixel_scores: Vec<f64> = Vec::new();
    let mut pixel_labels: Vec<bool> = Vec::new();
    let mut image_scores = Vec::with_capacity(test.len());
    let mut image_labels = Vec::with_capacity(test.len());
    let mut per_image = Vec::with_capacity(test.len());

    for idx in 0..test.len() {
        let x = test.load_image(idx)?;
        let out = detect_image(
            cfg,
            ie,
            expert,
            &measurer,
            &x,
            &format!("eval-noise-{idx}"),
        )?;
        let gt = test.load_mask(idx)?;

        for (p, g) in out.mask.iter().zip(gt.iter()) {
            let p = *p > 0.5;
            let g = *g > 0.5;
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
        if gt.iter().any(|g| *g > 0.5) {
            any_gt_positive = true;
        }
        pixel_scores.extend(out.map.normalized.iter().copied());
        pixel_labels.extend(gt.iter().map(|g| *g > 0.5));
        image_scores.push(out.score);
        let item = &test.items()[idx];
        image_labels.push(item.anomalous);
        per_image.push(PerImageRecord {
            index: idx,
            source: item.source.path_string(),
            label: item.label.clone(),
            anomalous: item.anomalous,
            score: out.score,
        });

        viz::save_gray(&maps_dir.join(format!("{idx:05}.png")), &out.map.normalized)?;
        crate::npy::write_npy(
            &maps_dir.join(format!("{idx:05}_raw.npy")),
            &out.map.raw.clone().into_dyn(),
        )?;
        viz::save_mask(&masks_dir.join(format!("{idx:05}.png")), &out.mask)?;
    }

    // pooled per-pixel IoU over the whole category test set
    let iou = if union == 0 {
        Some(1.0)
    } else if any_gt_positive {
        Some(inter as f64 / union as f64)
    } else {
        None // predictions exist but no ground truth: IoU is undefined here
    };
    let pixel_auroc = match (
        pixel_labels.iter().any(|l| *l),
        pixel_labels.iter().any(|l| !*l),
    ) {
        (true, true) => Some(auroc(&pixel_scores, &pixel_labels)?),
        _ => None,
    };
    let image_auroc = match (
        image_labels.iter().any(|l| *l),
        image_labels.iter().any(|l| !*l),
    ) {
        (true, true) => Some(auroc(&image_scores, &image_labels)?),
        _ => None,
    };

    let mut notes = vec![format!(
        "backbone={} layers={:?} measurement={:?}",
        match cfg.pm.backbone {
            crate::config::BackboneMode::Pretrained => "pretrained",
            crate::config::BackboneMode::Fallback => "fallback(seeded)",
        },
        cfg.pm.layers,
        cfg.pm.measurement,
    )];
    if image_auroc.is_none() {
        notes.push("image-level AuROC absent: test split has a single image class".into());
    }
    if pixel_auroc.is_none() {
        notes.push("pixel-level AuROC absent: no ground-truth masks in this split".into());
    }
    notes.extend(extra_notes.iter().cloned());

    let record = CategoryRecord {
        category: test.category.clone(),
        iou,
        pixel_auroc,
        image_auroc,
        item_count: test.len(),
    };
    let report = aggregate_report(vec![record], cfg.fingerprint(), notes)?;

    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json()).map_err(|e| Error::io(&report_path, e))?;
    let table_path = out_dir.join("report.txt");
    std::fs::write(&table_path, report.to_table()).map_err(|e| Error::io(&table_path, e))?;

    let mut csv = String::from("index,source,label,anomalous,score\n");
    for rec in &per_image {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.index, rec.source, rec.label, rec.anomalous, rec.score
        ));
    }
    let csv_path = out_dir.join("scores.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(report)
}

/// Single-image detection artifacts: the image quadruple (impression,
/// reconstruction, naive impression, heatmap) plus the binary mask and the
/// raw map values.
pub fn detect_to_files(
    cfg: &ExperimentConfig,
    ie: &IeNet,
    expert: Option<&ExpertNet>,
    image_path: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let raw = crate::data::preprocess::decode_image(image_path)?;
    let x = crate::data::preprocess(&raw, cfg.image_size, cfg.channels)?;
    let measurer = Measurer::new(&cfg.pm, cfg.image_size, true)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("input");
    let out = detect_image(cfg, ie, expert, &measurer, &x, &format!("detect-{stem}"))?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut write_img = |name: &str, img: &ImageTensor| -> Result<PathBuf> {
        let path = out_dir.join(format!("{stem}_{name}.png"));
        viz::save_rgb(&path, img.array())?;
        Ok(path)
    };
    written.push(write_img("impression", &out.impression)?);
    if let Some(xh) = &out.reconstruction {
        written.push(write_img("reconstruction", xh)?);
    }
    if let Some(mh) = &out.naive {
        written.push(write_img("naive", mh)?);
    }
    let heat = out_dir.join(format!("{stem}_heatmap.png"));
    viz::save_heatmap(&heat, &out.map.normalized)?;
    written.push(heat);
    let mask = out_dir.join(format!("{stem}_mask.png"));
    viz::save_mask(&mask, &out.mask)?;
    written.push(mask);
    let raw_path = out_dir.join(format!("{stem}_raw.npy"));
    crate::npy::write_npy(&raw_path, &out.map.raw.clone().into_dyn())?;
    written.push(raw_path);
    Ok(written)
}
