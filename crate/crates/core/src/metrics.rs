//! Pixel confusion counts and the six change-detection scores.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel tallies with change as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Counts agreement between a predicted and a reference binary mask; any
/// nonzero value is treated as change.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, reference has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Which scores hit a zero denominator and were reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedFlags {
    pub oa: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub iou: bool,
    pub kc: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.oa || self.precision || self.recall || self.f1 || self.iou || self.kc
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Cohen's kappa.
    pub kc: f64,
    pub undefined: UndefinedFlags,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// ```text
///   OA = (tp+tn)/n        P = tp/(tp+fp)        R = tp/(tp+fn)
///   F1 = 2tp/(2tp+fp+fn)  IoU = tp/(tp+fp+fn)
///   KC = (OA − p_e)/(1 − p_e),  p_e = [(tp+fp)(tp+fn) + (fn+tn)(fp+tn)]/n²
/// ```
/// A zero denominator yields 0 and sets the matching flag.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let n = tp + tn + fp + fn_;
    let mut u = UndefinedFlags::default();
    let oa = ratio(tp + tn, n, &mut u.oa);
    let precision = ratio(tp, tp + fp, &mut u.precision);
    let recall = ratio(tp, tp + fn_, &mut u.recall);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_, &mut u.f1);
    let iou = ratio(tp, tp + fp + fn_, &mut u.iou);
    let kc = if n == 0.0 {
        u.kc = true;
        0.0
    } else {
        let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
        ratio(oa - pe, 1.0 - pe, &mut u.kc)
    };
    Metrics {
        oa,
        precision,
        recall,
        f1,
        iou,
        kc,
        undefined: u,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let m = metrics(&ConfusionCounts::new(1, 1, 0, 0));
        for v in [m.oa, m.precision, m.recall, m.f1, m.iou, m.kc] {
            assert_eq!(v, 1.0);
        }
        let m = metrics(&ConfusionCounts::new(2, 6, 1, 1));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.iou - 0.5).abs() < 1e-12);
        assert!((m.oa - 0.8).abs() < 1e-12);
        assert!((m.kc - 0.22 / 0.42).abs() < 1e-12);
        assert!((m.kc - 0.5238).abs() < 1e-4);
        assert!(!m.undefined.any());
    }

    #[test]
    fn small_masks() {
        assert_eq!(confusion(&[1; 4], &[1; 4]).unwrap(), ConfusionCounts::new(4, 0, 0, 0));
        assert_eq!(confusion(&[1; 4], &[0; 4]).unwrap(), ConfusionCounts::new(0, 0, 4, 0));
        assert!(confusion(&[1; 4], &[0; 3]).is_err());
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let m = metrics(&ConfusionCounts::new(0, 4, 0, 0));
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.precision && m.undefined.recall && m.undefined.f1 && m.undefined.iou);
        assert!(m.undefined.kc, "p_e = 1 when both masks are constant");
        let m = metrics(&ConfusionCounts::default());
        assert!(m.undefined.oa);
    }
}
