//! Toggle-variant runner: trains and evaluates a set of ablation
//! configurations, sharing stage-one checkpoints and impression sets across
//! variants whose stage-one setup coincides.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::Serialize;

use crate::config::{ExperimentConfig, Toggles};
use crate::data::DatasetHandle;
use crate::error::Result;
use crate::metrics::EvaluationReport;

use super::{evaluate, impressions, train};

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
}

impl Variant {
    pub fn new(name: &str, mi: bool, expert: bool, guide: bool, naive: bool) -> Self {
        Self {
            name: name.to_string(),
            toggles: Toggles {
                use_mi_loss: mi,
                use_expert_net: expert,
                use_detail_guidance: guide,
                use_naive_impression_term: naive,
            },
        }
    }
}

/// The published ablation block: baseline through full model.
pub fn table_variants() -> Vec<Variant> {
    vec![
        Variant::new("baseline", false, false, false, false),
        Variant::new("mi", true, false, false, false),
        Variant::new("expert", false, true, false, false),
        Variant::new("mi-expert", true, true, false, false),
        Variant::new("expert-guide", false, true, true, false),
        Variant::new("mi-expert-guide", true, true, true, false),
        Variant::new("full", true, true, true, true),
    ]
}

/// Full model plus each single toggle disabled; used for the ordering check.
pub fn single_disabled_variants() -> Vec<Variant> {
    vec![
        Variant::new("full", true, true, true, true),
        Variant::new("no-mi", false, true, true, true),
        Variant::new("no-expert", true, false, true, true),
        Variant::new("no-guide", true, true, false, true),
        Variant::new("no-naive", true, true, true, false),
    ]
}

#[derive(Debug, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub use_mi_loss: bool,
    pub use_expert_net: bool,
    pub use_detail_guidance: bool,
    pub use_naive_impression_term: bool,
    pub report: EvaluationReport,
}

/// Train/evaluate every variant. Stage-one training is cached on the MI
/// toggle; stage-two training on (MI, guidance, naive-branch).
pub fn run_variants(
    base: &ExperimentConfig,
    variants: &[Variant],
    train_set: &DatasetHandle,
    test_set: &DatasetHandle,
    out_dir: &Path,
) -> Result<Vec<VariantResult>> {
    let mut train_images: Vec<Array3<f64>> = Vec::with_capacity(train_set.len());
    for idx in 0..train_set.len() {
        train_images.push(train_set.load_image(idx)?.into_array());
    }

    let mut ie_cache: HashMap<bool, PathBuf> = HashMap::new();
    let mut expert_cache: HashMap<(bool, bool, bool), PathBuf> = HashMap::new();
    let mut results = Vec::new();

    for variant in variants {
        let mut cfg = base.clone();
        cfg.toggles = variant.toggles.clone();

        let mi = cfg.toggles.use_mi_loss;
        let ie_dir = out_dir.join(if mi { "stage1_mi" } else { "stage1_plain" });
        let ie_ckpt = match ie_cache.get(&mi) {
            Some(path) => path.clone(),
            None => {
                let log = train::RunLog::new(&ie_dir)?;
                let outcome = train::train_ie_net(&cfg, &train_images, &ie_dir, &log)?;
                ie_cache.insert(mi, outcome.best_checkpoint.clone());
                outcome.best_checkpoint
            }
        };
        let ie = train::load_ie(&cfg, &ie_ckpt)?;

        let expert_ckpt = if cfg.toggles.use_expert_net {
            let key = (
                mi,
                cfg.toggles.use_detail_guidance,
                cfg.toggles.use_naive_impression_term,
            );
            match expert_cache.get(&key) {
                Some(path) => Some(path.clone()),
                None => {
                    impressions::generate_impression_set(
                        &cfg,
                        &ie,
                        &ie_ckpt,
                        train_set,
                        &ie_dir,
                        false,
                    )?;
                    let impression_images = impressions::load_impressions(&ie_dir, &ie_ckpt)?;
                    let ex_dir = out_dir.join(format!(
                        "stage2_{}_{}_{}",
                        if mi { "mi" } else { "plain" },
                        if key.1 { "guide" } else { "noise" },
                        if key.2 { "naive" } else { "nonaive" }
                    ));
                    let log = train::RunLog::new(&ex_dir)?;
                    let outcome = train::train_expert_net(
                        &cfg,
                        &train_images,
                        &impression_images,
                        &ex_dir,
                        &log,
                    )?;
                    expert_cache.insert(key, outcome.best_checkpoint.clone());
                    Some(outcome.best_checkpoint)
                }
            }
        } else {
            None
        };
        let expert = expert_ckpt
            .as_ref()
            .map(|path| train::load_expert(&cfg, path))
            .transpose()?;

        let row_dir = out_dir.join("rows").join(&variant.name);
        std::fs::create_dir_all(&row_dir)
            .map_err(|e| crate::error::Error::io(&row_dir, e))?;
        let report = evaluate::evaluate(
            &cfg,
            &ie,
            expert.as_ref(),
            test_set,
            &row_dir,
            &[format!("ablation-variant={}", variant.name)],
        )?;
        results.push(VariantResult {
            name: variant.name.clone(),
            use_mi_loss: variant.toggles.use_mi_loss,
            use_expert_net: variant.toggles.use_expert_net,
            use_detail_guidance: variant.toggles.use_detail_guidance,
            use_naive_impression_term: variant.toggles.use_naive_impression_term,
            report,
        });
    }
    Ok(results)
}

/// Comparative text table over variant results.
pub fn comparison_table(results: &[VariantResult]) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "   -  ".into(),
    };
    let mut out = format!(
        "{:<18} {:>4} {:>6} {:>6} {:>6} {:>8} {:>12} {:>12}\n",
        "variant", "MI", "expert", "guide", "naive", "IoU", "pixel-AuROC", "image-AuROC"
    );
    for r in results {
        out.push_str(&format!(
            "{:<18} {:>4} {:>6} {:>6} {:>6} {:>8} {:>12} {:>12}\n",
            r.name,
            r.use_mi_loss as u8,
            r.use_expert_net as u8,
            r.use_detail_guidance as u8,
            r.use_naive_impression_term as u8,
            fmt(r.report.mean_iou),
            fmt(r.report.mean_pixel_auroc),
            fmt(r.report.mean_image_auroc),
        ));
    }
    out
}

/// Persist the comparative report as JSON and text.
pub fn write_comparison(results: &[VariantResult], out_dir: &Path) -> Result<()> {
    let json_path = out_dir.join("ablation_report.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(results).expect("results serialize"),
    )
    .map_err(|e| crate::error::Error::io(&json_path, e))?;
    let txt_path = out_dir.join("ablation_report.txt");
    std::fs::write(&txt_path, comparison_table(results))
        .map_err(|e| crate::error::Error::io(&txt_path, e))
}
