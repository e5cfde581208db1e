use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::check_binary;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from threshold `+inf` down to `-inf`; a score `s` is
/// positive at threshold `t` when `s >= t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps every distinct score. Returns `None` when `labels` hold a single
/// class. The trapezoid sum is accumulated in integers, so the AUC equals
/// the pair-count probability with ties counted as one half.
pub fn auc_roc_slices(scores: &[f32], labels: &[f32]) -> Result<Option<RocCurve>> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    check_binary("label", labels)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::contract(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l == 1.0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint { threshold: s as f64, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fpr: 1.0, tpr: 1.0 });
    let auc = twice_area as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(Some(RocCurve { points, auc }))
}

pub fn auc_roc(scores: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Option<RocCurve>> {
    if scores.dims() != gt.dims() {
        return Err(Error::dim(format!("scores {} and ground truth {} differ in shape", scores.shape(), gt.shape())));
    }
    auc_roc_slices(scores.data(), gt.data())
}
