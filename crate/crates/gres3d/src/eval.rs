//! Evaluation protocol: per-sample point-level IoU with the zero-target
//! conventions, Acc@0.25 / Acc@0.5, mean IoU, and the five-category
//! breakdown.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, Prediction};

/// Per-sample IoU over points.
///
/// Zero-target samples follow the confidence convention: IoU is 1 when
/// every query confidence stays at or below 0.5, and 0 the moment any
/// query fires.
pub fn sample_iou(pred: &Prediction, gt_point_mask: &[bool], gt_empty: bool) -> Result<f64> {
    if pred.final_point_mask.len() != gt_point_mask.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction covers {} points, ground truth {}",
            pred.final_point_mask.len(),
            gt_point_mask.len()
        )));
    }
    if gt_empty {
        let fired = pred.confidences.iter().any(|&c| c > 0.5);
        return Ok(if fired { 0.0 } else { 1.0 });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.final_point_mask.iter().zip(gt_point_mask) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// One evaluated sample.
pub struct EvalEntry {
    pub prediction: Prediction,
    pub gt_point_mask: Vec<bool>,
    pub gt_empty: bool,
    pub category: Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub acc_025: f64,
    pub acc_05: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerCategory {
    pub zt_dis: CategoryStats,
    pub zt_nodis: CategoryStats,
    pub st_dis: CategoryStats,
    pub st_nodis: CategoryStats,
    pub mt: CategoryStats,
}

impl PerCategory {
    pub fn get(&self, cat: Category) -> &CategoryStats {
        match cat {
            Category::ZtDis => &self.zt_dis,
            Category::ZtNodis => &self.zt_nodis,
            Category::StDis => &self.st_dis,
            Category::StNodis => &self.st_nodis,
            Category::Mt => &self.mt,
        }
    }

    fn get_mut(&mut self, cat: Category) -> &mut CategoryStats {
        match cat {
            Category::ZtDis => &mut self.zt_dis,
            Category::ZtNodis => &mut self.zt_nodis,
            Category::StDis => &mut self.st_dis,
            Category::StNodis => &mut self.st_nodis,
            Category::Mt => &mut self.mt,
        }
    }
}

/// Aggregate metrics; serializes to the report JSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub acc_025: f64,
    pub acc_05: f64,
    pub per_category: PerCategory,
    pub sample_count: usize,
}

/// Accuracy at threshold k counts samples with IoU strictly above k.
pub fn evaluate(entries: &[EvalEntry]) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut iou_sum = 0.0;
    let mut over_025 = 0usize;
    let mut over_05 = 0usize;
    let mut per: [(usize, usize, usize); 5] = [(0, 0, 0); 5];
    for entry in entries {
        let iou = sample_iou(&entry.prediction, &entry.gt_point_mask, entry.gt_empty)?;
        iou_sum += iou;
        let slot = Category::ALL
            .iter()
            .position(|&c| c == entry.category)
            .expect("category enumerated");
        per[slot].0 += 1;
        if iou > 0.25 {
            over_025 += 1;
            per[slot].1 += 1;
        }
        if iou > 0.5 {
            over_05 += 1;
            per[slot].2 += 1;
        }
    }
    let n = entries.len() as f64;
    let mut per_category = PerCategory::default();
    for (slot, &cat) in Category::ALL.iter().enumerate() {
        let (count, c025, c05) = per[slot];
        let stats = per_category.get_mut(cat);
        stats.count = count;
        if count > 0 {
            stats.acc_025 = c025 as f64 / count as f64;
            stats.acc_05 = c05 as f64 / count as f64;
        }
    }
    Ok(EvalReport {
        miou: iou_sum / n,
        acc_025: over_025 as f64 / n,
        acc_05: over_05 as f64 / n,
        per_category,
        sample_count: entries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    /// Prediction with explicit masks and confidences; mask logits are
    /// synthesized so the binarized masks reproduce `point_mask` exactly
    /// when expanded through singleton superpoints.
    pub(crate) fn fake_prediction(point_mask: Vec<bool>, confidences: Vec<f64>) -> Prediction {
        let n_p = point_mask.len();
        let n_q = confidences.len();
        let mut logits = vec![-1.0; n_q * n_p];
        let fired = confidences.iter().any(|&c| c > 0.5);
        if fired {
            for (i, &m) in point_mask.iter().enumerate() {
                if m {
                    // give the mask to the first confident query
                    let q = confidences.iter().position(|&c| c > 0.5).unwrap();
                    logits[q * n_p + i] = 1.0;
                }
            }
        }
        Prediction {
            mask_logits: Tensor::new(&[n_q, n_p], logits).unwrap(),
            confidences,
            final_point_mask: if fired { point_mask } else { vec![false; n_p] },
            query_sources: vec![0; n_q],
            relevance: vec![],
            seed_sources: vec![0],
        }
    }

    #[test]
    fn perfect_prediction_has_iou_one() {
        let gt = vec![true, false, true, true];
        let pred = fake_prediction(gt.clone(), vec![0.9]);
        assert_eq!(sample_iou(&pred, &gt, false).unwrap(), 1.0);
    }

    #[test]
    fn zero_target_conventions() {
        let gt = vec![false; 4];
        let quiet = fake_prediction(vec![false; 4], vec![0.2, 0.5]);
        assert_eq!(sample_iou(&quiet, &gt, true).unwrap(), 1.0);
        let fired = fake_prediction(vec![true, false, false, false], vec![0.2, 0.7]);
        assert_eq!(sample_iou(&fired, &gt, true).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let pred = fake_prediction(vec![false; 4], vec![0.9]);
        assert!(sample_iou(&pred, &[false; 5], false).is_err());
    }

    #[test]
    fn iou_is_symmetric_for_nonempty_gt() {
        let a = vec![true, true, false, false, true];
        let b = vec![true, false, true, false, true];
        let pa = fake_prediction(a.clone(), vec![0.9]);
        let pb = fake_prediction(b.clone(), vec![0.9]);
        assert_eq!(
            sample_iou(&pa, &b, false).unwrap(),
            sample_iou(&pb, &a, false).unwrap()
        );
    }

    fn entry(point_mask: Vec<bool>, gt: Vec<bool>, conf: f64, category: Category) -> EvalEntry {
        let gt_empty = gt.iter().all(|&g| !g);
        EvalEntry {
            prediction: fake_prediction(point_mask, vec![conf]),
            gt_point_mask: gt,
            gt_empty,
            category,
        }
    }

    #[test]
    fn perfect_everything_scores_one_everywhere() {
        let entries = vec![
            entry(vec![true, false], vec![true, false], 0.9, Category::StDis),
            entry(vec![false, true], vec![false, true], 0.9, Category::Mt),
            entry(vec![false, false], vec![false, false], 0.1, Category::ZtNodis),
        ];
        let report = evaluate(&entries).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.acc_025, 1.0);
        assert_eq!(report.acc_05, 1.0);
        assert_eq!(report.per_category.st_dis.acc_05, 1.0);
        assert_eq!(report.per_category.mt.count, 1);
        assert_eq!(report.sample_count, 3);
    }

    #[test]
    fn category_counts_partition_the_samples() {
        let entries = vec![
            entry(vec![true], vec![true], 0.9, Category::StDis),
            entry(vec![true], vec![false], 0.9, Category::StNodis),
            entry(vec![false], vec![false], 0.2, Category::ZtDis),
            entry(vec![false], vec![false], 0.9, Category::ZtDis),
            entry(vec![true], vec![true], 0.9, Category::Mt),
        ];
        let report = evaluate(&entries).unwrap();
        let total: usize = Category::ALL
            .iter()
            .map(|&c| report.per_category.get(c).count)
            .sum();
        assert_eq!(total, entries.len());
        assert_eq!(report.per_category.zt_dis.count, 2);
        assert!((report.per_category.zt_dis.acc_05 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_is_invariant_under_sample_permutation() {
        let mut entries = vec![
            entry(vec![true, true], vec![true, false], 0.9, Category::StDis),
            entry(vec![false, true], vec![false, true], 0.9, Category::Mt),
            entry(vec![false, false], vec![false, false], 0.2, Category::ZtNodis),
            entry(vec![true, false], vec![true, true], 0.9, Category::StNodis),
        ];
        let a = evaluate(&entries).unwrap();
        entries.reverse();
        let b = evaluate(&entries).unwrap();
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.acc_025, b.acc_025);
        assert_eq!(a.per_category, b.per_category);
    }

    #[test]
    fn acc_05_never_exceeds_acc_025() {
        let entries = vec![
            entry(vec![true, false, false], vec![true, true, false], 0.9, Category::StDis),
            entry(vec![true, true, false], vec![true, true, true], 0.9, Category::Mt),
            entry(vec![false, false, true], vec![true, false, false], 0.9, Category::StNodis),
        ];
        let report = evaluate(&entries).unwrap();
        assert!(report.acc_05 <= report.acc_025);
    }

    #[test]
    fn report_serializes_with_expected_keys() {
        let entries = vec![entry(vec![true], vec![true], 0.9, Category::Mt)];
        let report = evaluate(&entries).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("miou").is_some());
        assert!(json.get("acc_025").is_some());
        assert!(json.get("acc_05").is_some());
        let per = json.get("per_category").unwrap();
        for key in ["zt_dis", "zt_nodis", "st_dis", "st_nodis", "mt"] {
            assert!(per.get(key).is_some(), "missing {key}");
        }
    }
}
