//! Segmentation metrics: confusion rates, ROC/AUC, Dice, over/under
//! segmentation and tolerance-band centerline scores. Undefined values are
//! `None`, never a silent 0 or 1.

mod centerline;
mod render;
mod report;
mod roc;

pub use centerline::{centerline_metrics, match_centerline, squared_distance_transform, thin, CenterlineScores, CENTERLINE_TOLERANCE};
pub use render::{mip_png, roc_png, write_gray_png};
pub use report::{mean_defined, write_roc_csv, Cell, MetricsReport, ReportRow, SampleMetrics, COLUMNS};
pub use roc::{auc_roc, auc_roc_slices, RocCurve, RocPoint};

use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub(crate) fn check_binary(name: &str, xs: &[f32]) -> Result<()> {
    match xs.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::contract(format!("{name} mask is not binary: element {i} is {}", xs[i]))),
        None => Ok(()),
    }
}

pub(crate) fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::dim(format!("prediction {} and ground truth {} differ in shape", pred.shape(), gt.shape())));
    }
    check_binary("prediction", pred.data())?;
    check_binary("ground truth", gt.data())
}

pub fn confusion(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Rates {
    pub acc: Option<f64>,
    /// Sensitivity, also the true positive rate.
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_rates(c: &ConfusionCounts) -> Rates {
    let se = ratio(c.tp, c.positives());
    let sp = ratio(c.tn, c.negatives());
    Rates {
        acc: ratio(c.tp + c.tn, c.total()),
        se,
        sp,
        fnr: se.map(|v| 1.0 - v),
        fpr: sp.map(|v| 1.0 - v),
    }
}

/// Foreground where `p >= threshold`.
pub fn binarize(prob: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    prob.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// `2|P∩G| / (|P| + |G|)`, 1 when both masks are empty.
pub fn dice_coefficient(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let den = 2 * c.tp + c.fp + c.fn_;
    Ok(if den == 0 { 1.0 } else { 2.0 * c.tp as f64 / den as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverUnder {
    pub or: f64,
    pub ur: f64,
}

/// Over-segmentation `|P∖G| / (|G| + |P∖G|)` and under-segmentation
/// `|G∖P| / (|G| + |P∖G|)`.
pub fn or_ur(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Option<OverUnder>> {
    let c = confusion(pred, gt)?;
    let (over, under, reference) = (c.fp, c.fn_, c.tp + c.fn_);
    let den = reference + over;
    Ok((den > 0).then(|| OverUnder { or: over as f64 / den as f64, ur: under as f64 / den as f64 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::from_vec(vec![bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    /// 100 elements laid out as tp=8, fn=2, tn=85, fp=5.
    fn fixture() -> (Tensor<f32>, Tensor<f32>) {
        let mut p = vec![];
        let mut g = vec![];
        for (n, pv, gv) in [(8, 1, 1), (2, 0, 1), (85, 0, 0), (5, 1, 0)] {
            p.extend(std::iter::repeat_n(pv, n));
            g.extend(std::iter::repeat_n(gv, n));
        }
        (mask(&p), mask(&g))
    }

    #[test]
    fn confusion_examples() {
        let (p, g) = fixture();
        let c = confusion(&p, &g).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 8, fp: 5, tn: 85, fn_: 2 });
        let r = basic_rates(&c);
        assert_eq!(r.se, Some(0.8));
        assert!((r.sp.unwrap() - 85.0 / 90.0).abs() < 1e-15);
        assert!((r.sp.unwrap() - 0.94444).abs() < 1e-5);
        assert_eq!(r.acc, Some(0.93));
        let same = confusion(&g, &g).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        assert_eq!(basic_rates(&same).acc, Some(1.0));
        let inv = confusion(&g.map(|v| 1.0 - v), &g).unwrap();
        assert_eq!((inv.tp, inv.tn), (0, 0));
    }

    #[test]
    fn undefined_rates_are_flagged() {
        let bg = mask(&[0, 0, 0]);
        let r = basic_rates(&confusion(&bg, &bg).unwrap());
        assert_eq!(r.se, None);
        assert_eq!(r.sp, Some(1.0));
        assert!(matches!(confusion(&mask(&[0, 2]), &bg), Err(Error::Dimension(_))));
        let half = Tensor::from_vec(vec![3], vec![0.0, 0.5, 1.0]).unwrap();
        assert!(matches!(confusion(&half, &bg), Err(Error::Contract(_))));
    }

    #[test]
    fn dice_examples() {
        let g = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice_coefficient(&g, &g).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&mask(&[0, 0, 0, 0, 1, 1, 1, 1]), &g).unwrap(), 0.0);
        let p = mask(&[1, 1, 1, 0, 1, 1, 1, 0]);
        assert!((dice_coefficient(&p, &g).unwrap() - 0.6).abs() < 1e-15);
        let empty = mask(&[0, 0]);
        assert_eq!(dice_coefficient(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn or_ur_examples() {
        let mut g = vec![1u8; 10];
        g.extend([0u8; 6]);
        let gt = mask(&g);
        assert_eq!(or_ur(&gt, &gt).unwrap(), Some(OverUnder { or: 0.0, ur: 0.0 }));
        let mut p = g.clone();
        p[0] = 0;
        p[10] = 1;
        p[11] = 1;
        let r = or_ur(&mask(&p), &gt).unwrap().unwrap();
        assert!((r.or - 2.0 / 12.0).abs() < 1e-15 && (r.ur - 1.0 / 12.0).abs() < 1e-15);
        let r = or_ur(&mask(&[0; 16]), &gt).unwrap().unwrap();
        assert_eq!((r.or, r.ur), (0.0, 1.0));
        assert_eq!(or_ur(&mask(&[0; 4]), &mask(&[0; 4])).unwrap(), None);
    }

    proptest! {
        #[test]
        fn rate_identities(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..300)) {
            let p = mask(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let g = mask(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let c = confusion(&p, &g).unwrap();
            prop_assert_eq!(c.total() as usize, bits.len());
            let r = basic_rates(&c);
            for v in [r.acc, r.se, r.sp, r.fnr, r.fpr].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(se), Some(sp)) = (r.se, r.sp) {
                let recon = (se * c.positives() as f64 + sp * c.negatives() as f64) / c.total() as f64;
                prop_assert!((recon - r.acc.unwrap()).abs() < 1e-12);
            }
            prop_assert_eq!(dice_coefficient(&p, &g).unwrap(), dice_coefficient(&g, &p).unwrap());
            if let Some(ou) = or_ur(&p, &g).unwrap() {
                let den = (c.tp + c.fn_ + c.fp) as f64;
                prop_assert_eq!(ou.or, c.fp as f64 / den);
                prop_assert_eq!(ou.ur, c.fn_ as f64 / den);
            }
        }
    }
}
