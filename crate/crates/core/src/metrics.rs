//! Threshold-free and fixed-TPR metrics over ID/OOD score lists.
//!
//! In-distribution samples are the positive class everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::calibrate_tau;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricReport {
    pub fn compute(method: impl Into<String>, id: &[f64], ood: &[f64]) -> Result<Self> {
        Ok(MetricReport {
            method: method.into(),
            fpr95: fpr_at_tpr(id, ood, 0.95)?,
            auroc: auroc(id, ood)?,
            aupr: aupr(id, ood)?,
            n_id: id.len(),
            n_ood: ood.len(),
        })
    }
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Usage("metrics need nonempty ID and OOD score lists".into()));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::Usage("scores must be finite".into()));
    }
    Ok(())
}

/// Fraction of OOD scores at or above the threshold that keeps `target_tpr`
/// of the ID scores.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], target_tpr: f64) -> Result<f64> {
    check(id, ood)?;
    let tau = calibrate_tau(id, target_tpr)?;
    Ok(ood.iter().filter(|&&s| s >= tau).count() as f64 / ood.len() as f64)
}

/// Mann–Whitney statistic with ties counted as one half, via midranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ranks are 1-based; a tie block spanning ranks lo..=hi gets (lo+hi)/2
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start;
        while end + 1 < all.len() && all[end + 1].0 == all[start].0 {
            end += 1;
        }
        let mid = (start + end + 2) as f64 / 2.0;
        let positives = all[start..=end].iter().filter(|x| x.1).count();
        rank_sum += mid * positives as f64;
        start = end + 1;
    }
    let n1 = id.len() as f64;
    let n0 = ood.len() as f64;
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Step-sum average precision with ID as the positive class.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    Ok(average_precision(id, ood))
}

/// `Σ (R_i − R_{i−1})·P_i` over distinct score thresholds in descending order.
/// Requires at least one positive.
fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total;
        if recall > prev_recall {
            ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
            prev_recall = recall;
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAp {
    /// Mean AP over classes with at least one positive.
    pub value: f64,
    /// Per-class AP; `None` for excluded classes.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Mean over classes of the AP of `probs[:, n]` against `labels[:, n]`.
pub fn macro_ap(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroAp> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} prediction rows vs {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    let nc = probs[0].len();
    if probs.iter().any(|r| r.len() != nc) || labels.iter().any(|r| r.len() != nc) {
        return Err(Error::Usage("prediction and label rows must share one class count".into()));
    }
    if probs.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::Usage("predictions must be finite".into()));
    }
    let mut per_class = Vec::with_capacity(nc);
    let mut excluded = Vec::new();
    for n in 0..nc {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (row, lab) in probs.iter().zip(labels) {
            if lab[n] {
                pos.push(row[n]);
            } else {
                neg.push(row[n]);
            }
        }
        if pos.is_empty() {
            log::warn!("class {n} has no positives; excluded from macro AP");
            excluded.push(n);
            per_class.push(None);
        } else {
            per_class.push(Some(average_precision(&pos, &neg)));
        }
    }
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Usage("no class has a positive label".into()));
    }
    Ok(MacroAp {
        value: kept.iter().sum::<f64>() / kept.len() as f64,
        per_class,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fpr_examples() {
        let id = [0.9, 0.8, 0.7, 0.6, 0.5];
        let ood = [0.55, 0.4, 0.3, 0.2];
        assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), 0.25);
        assert_eq!(fpr_at_tpr(&[0.9, 0.8], &[0.1, 0.2], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[0.3, 0.6], &[0.3, 0.6], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(aupr(&[0.9], &[0.8, 0.7]).unwrap(), 1.0);
        assert!((aupr(&[0.7], &[0.9, 0.8]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_lists_are_usage_errors() {
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::Usage(_))));
        assert!(matches!(aupr(&[1.0], &[]), Err(Error::Usage(_))));
        assert!(matches!(fpr_at_tpr(&[], &[], 0.95), Err(Error::Usage(_))));
    }

    #[test]
    fn macro_ap_perfect_and_inverted() {
        let labels = vec![
            vec![true, false],
            vec![false, true],
            vec![true, true],
            vec![false, false],
        ];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(macro_ap(&probs, &labels).unwrap().value, 1.0);
        let inv: Vec<Vec<f64>> = probs.iter().map(|r| r.iter().map(|p| 1.0 - p).collect()).collect();
        // both positives tie below both negatives: one threshold at recall 1, precision ½
        assert_eq!(macro_ap(&inv, &labels).unwrap().value, 0.5);
    }

    #[test]
    fn class_without_positives_is_excluded() {
        let labels = vec![vec![true, false], vec![false, false]];
        let probs = vec![vec![0.9, 0.2], vec![0.1, 0.3]];
        let m = macro_ap(&probs, &labels).unwrap();
        assert_eq!(m.excluded, vec![1]);
        assert_eq!(m.per_class, vec![Some(1.0), None]);
        assert_eq!(m.value, 1.0);
    }
}
