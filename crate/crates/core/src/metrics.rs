//! Evaluation metrics: IoU over binary masks, Mann-Whitney AuROC, and the
//! aggregate per-category report.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersection over union of two binary masks. Returns 1.0 when both masks
/// are empty, so anomaly-free images with empty predictions score perfect.
pub fn iou(pred: &ArrayView2<f64>, gt: &ArrayView2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape {
            ctx: "iou masks",
            expected: format!("{:?}", pred.dim()),
            got: format!("{:?}", gt.dim()),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let p = *p > 0.5;
        let g = *g > 0.5;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Area under the ROC curve via the rank (Mann-Whitney) formulation:
/// the probability that a random positive outscores a random negative,
/// counting ties as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            ctx: "auroc inputs",
            expected: format!("{}", scores.len()),
            got: format!("{}", labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));

    // average ranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            if labels[order[k]] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoryRecord {
    pub category: String,
    pub iou: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub image_auroc: Option<f64>,
    pub item_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluationReport {
    pub categories: Vec<CategoryRecord>,
    /// Unweighted means over the categories where the metric exists.
    pub mean_iou: Option<f64>,
    pub mean_pixel_auroc: Option<f64>,
    pub mean_image_auroc: Option<f64>,
    pub config_fingerprint: String,
    pub notes: Vec<String>,
}

/// Unweighted aggregation across categories.
pub fn aggregate_report(
    mut categories: Vec<CategoryRecord>,
    config_fingerprint: String,
    notes: Vec<String>,
) -> Result<EvaluationReport> {
    if categories.is_empty() {
        return Err(Error::EmptyInput("aggregate_report categories"));
    }
    for record in &categories {
        for value in [record.iou, record.pixel_auroc, record.image_auroc]
            .into_iter()
            .flatten()
        {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Shape {
                    ctx: "metric range",
                    expected: "[0,1]".into(),
                    got: format!("{value}"),
                });
            }
        }
    }
    categories.sort_by(|a, b| a.category.cmp(&b.category));
    let mean = |get: fn(&CategoryRecord) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = categories.iter().filter_map(get).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    Ok(EvaluationReport {
        mean_iou: mean(|r| r.iou),
        mean_pixel_auroc: mean(|r| r.pixel_auroc),
        mean_image_auroc: mean(|r| r.image_auroc),
        categories,
        config_fingerprint,
        notes,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable fixed-width table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "   -  ".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>12} {:>12} {:>7}\n",
            "category", "IoU", "pixel-AuROC", "image-AuROC", "items"
        ));
        for r in &self.categories {
            out.push_str(&format!(
                "{:<24} {:>8} {:>12} {:>12} {:>7}\n",
                r.category,
                fmt(r.iou),
                fmt(r.pixel_auroc),
                fmt(r.image_auroc),
                r.item_count
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>8} {:>12} {:>12}\n",
            "mean",
            fmt(self.mean_iou),
            fmt(self.mean_pixel_auroc),
            fmt(self.mean_image_auroc)
        ));
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("category,iou,pixel_auroc,image_auroc,item_count\n");
        for r in &self.categories {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.category,
                fmt(r.iou),
                fmt(r.pixel_auroc),
                fmt(r.image_auroc),
                r.item_count
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn mask_from(points: &[(usize, usize)], dim: (usize, usize)) -> Array2<f64> {
        let mut m = Array2::zeros(dim);
        for (y, x) in points {
            m[[*y, *x]] = 1.0;
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = mask_from(&[(0, 0), (0, 1), (1, 0), (1, 1)], (4, 4));
        assert_eq!(iou(&a.view(), &a.view()).unwrap(), 1.0);

        let b = mask_from(&[(3, 3), (3, 2), (2, 3), (2, 2)], (4, 4));
        assert_eq!(iou(&a.view(), &b.view()).unwrap(), 0.0);

        // 4 px and 4 px with 2 shared -> 2/6
        let c = mask_from(&[(0, 0), (0, 1), (2, 2), (2, 3)], (4, 4));
        let d = mask_from(&[(0, 0), (0, 1), (3, 0), (3, 1)], (4, 4));
        let v = iou(&c.view(), &d.view()).unwrap();
        assert!((v - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn iou_empty_convention() {
        let e = Array2::<f64>::zeros((3, 3));
        assert_eq!(iou(&e.view(), &e.view()).unwrap(), 1.0);
    }

    #[test]
    fn auroc_examples() {
        let v = auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(v, 1.0);

        let v = auroc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(v, 0.5);

        // 3 of 4 pairs correctly ordered
        let v = auroc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_needs_both_classes() {
        let err = auroc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert_eq!(err.category(), "degenerate-labels");
    }

    /// Independent O(n^2) pairwise oracle.
    fn auroc_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, (si, li)) in scores.iter().zip(labels).enumerate() {
            if !li {
                continue;
            }
            for (sj, lj) in scores.iter().zip(labels) {
                if *lj {
                    continue;
                }
                total += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
            let _ = i;
        }
        wins / total
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise_oracle(
            raw in prop::collection::vec((0u8..32, prop::bool::ANY), 2..120)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_bruteforce(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-9);
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            raw in prop::collection::vec((-40i32..40, prop::bool::ANY), 2..80)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 * 0.21).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let base = auroc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 2.0).collect();
            let after = auroc(&warped, &labels).unwrap();
            prop_assert!((base - after).abs() < 1e-12);
        }

        #[test]
        fn auroc_label_reversal_complements(
            raw in prop::collection::vec((0u8..16, prop::bool::ANY), 2..80)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let base = auroc(&scores, &labels).unwrap();
            let flipped: Vec<bool> = labels.iter().map(|l| !*l).collect();
            let rev = auroc(&scores, &flipped).unwrap();
            prop_assert!((base + rev - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_is_symmetric(
            pa in prop::collection::vec(prop::bool::ANY, 36),
            pb in prop::collection::vec(prop::bool::ANY, 36)
        ) {
            let a = Array2::from_shape_vec((6, 6), pa.iter().map(|b| *b as u8 as f64).collect()).unwrap();
            let b = Array2::from_shape_vec((6, 6), pb.iter().map(|b| *b as u8 as f64).collect()).unwrap();
            let ab = iou(&a.view(), &b.view()).unwrap();
            let ba = iou(&b.view(), &a.view()).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }

    #[test]
    fn aggregate_mean_is_arithmetic() {
        let records = vec![
            CategoryRecord {
                category: "a".into(),
                iou: Some(0.2),
                pixel_auroc: Some(0.9),
                image_auroc: None,
                item_count: 5,
            },
            CategoryRecord {
                category: "b".into(),
                iou: Some(0.4),
                pixel_auroc: Some(0.8),
                image_auroc: Some(1.0),
                item_count: 7,
            },
        ];
        let report = aggregate_report(records, "fp".into(), vec![]).unwrap();
        assert!((report.mean_iou.unwrap() - 0.3).abs() < 1e-12);
        assert!((report.mean_pixel_auroc.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(report.mean_image_auroc, Some(1.0));
    }

    #[test]
    fn fifteen_category_mock_matches_published_mean() {
        // published per-category IoU column of the strongest method
        let ious = [
            0.37, 0.38, 0.41, 0.79, 0.89, 0.65, 0.79, 0.47, 0.49, 0.44, 0.40, 0.53, 0.47,
            0.59, 0.30,
        ];
        let records: Vec<CategoryRecord> = ious
            .iter()
            .enumerate()
            .map(|(i, v)| CategoryRecord {
                category: format!("cat{i:02}"),
                iou: Some(*v),
                pixel_auroc: None,
                image_auroc: None,
                item_count: 1,
            })
            .collect();
        let report = aggregate_report(records, "fp".into(), vec![]).unwrap();
        let mean = report.mean_iou.unwrap();
        assert!((mean - 0.531333).abs() < 1e-4);
        assert_eq!(format!("{:.2}", mean), "0.53");
    }

    #[test]
    fn single_category_aggregate_is_identity() {
        let records = vec![CategoryRecord {
            category: "solo".into(),
            iou: Some(0.77),
            pixel_auroc: Some(0.66),
            image_auroc: Some(0.55),
            item_count: 3,
        }];
        let report = aggregate_report(records, "fp".into(), vec![]).unwrap();
        assert_eq!(report.mean_iou, Some(0.77));
        assert_eq!(report.mean_pixel_auroc, Some(0.66));
        assert_eq!(report.mean_image_auroc, Some(0.55));
    }

    #[test]
    fn empty_aggregate_is_error() {
        let err = aggregate_report(vec![], "fp".into(), vec![]).unwrap_err();
        assert_eq!(err.category(), "empty-input");
    }
}
