//! Training loss and pixel-level evaluation metrics.
//!
//! Dataset metrics are micro-averaged: confusion counts are summed over every evaluated pixel
//! first and the ratios are computed once from the totals.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

/// Logits are clamped to this magnitude before the loss is evaluated.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Default Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

/// Default binarization threshold on probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_target(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.numel() != target.numel() {
        return Err(shape_err!(
            "target {:?} does not match prediction {:?}",
            target.shape(),
            logits.shape()
        ));
    }
    if let Some((index, &value)) = target.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinaryTarget { index, value });
    }
    Ok(())
}

/// Loss value and its gradient with respect to every logit.
///
/// `loss = mean_i BCE(sigmoid(z_i), t_i) + 1 - (2 Σ p t + eps) / (Σ p + Σ t + eps)`, where the
/// Dice term runs jointly over the whole batch. BCE uses the stable form
/// `max(z, 0) - z t + ln(1 + e^{-|z|})`.
pub(crate) fn bce_dice_with_grad(logits: &Tensor, target: &Tensor, eps: f64) -> Result<(f64, Vec<f64>)> {
    check_target(logits, target)?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("dice smoothing must be positive, got {eps}")));
    }
    let n = logits.numel() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    let mut probs = Vec::with_capacity(logits.numel());
    for (&raw, &t) in logits.data().iter().zip(target.data()) {
        let z = raw.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        bce += z.max(0.0) - z * t + libm::log1p(libm::exp(-libm::fabs(z)));
        let p = sigmoid(z);
        inter += p * t;
        sum_p += p;
        sum_t += t;
        probs.push(p);
    }
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_t + eps;
    let loss = bce / n + 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(logits.data())
        .zip(target.data())
        .map(|((&p, &raw), &t)| {
            if raw.abs() > LOGIT_CLAMP {
                return 0.0;
            }
            let d_dice_dp = -(2.0 * t * den - num) / (den * den);
            (p - t) / n + d_dice_dp * p * (1.0 - p)
        })
        .collect();
    Ok((loss, grad))
}

/// BCE + Dice loss of `logits (B, H, W, 1)` against a binary mask of the same size.
pub fn bce_dice_loss(logits: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    bce_dice_with_grad(logits, target, eps).map(|(l, _)| l)
}

/// Soft Dice loss alone, on probabilities.
pub fn dice_loss(probs: &[f64], target: &[f64], eps: f64) -> f64 {
    let inter: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = probs.iter().sum();
    let st: f64 = target.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        metrics_from_counts(self.tp, self.fp, self.fn_)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
            tn: self.tn + rhs.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Counts pixels with `prob >= threshold` as predicted road.
pub fn confusion_counts(prob: &Tensor, target: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    check_target(prob, target)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in prob.data().iter().zip(target.data()) {
        match (p >= threshold, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision `tp/(tp+fp)`, recall `tp/(tp+fn)`, F1 and IoU `tp/(tp+fp+fn)`.
///
/// F1 is evaluated as `2 tp / (2 tp + fp + fn)`, which is the harmonic mean of precision and
/// recall whenever either is nonzero. Any zero denominator yields 0.
pub fn metrics_from_counts(tp: u64, fp: u64, fn_: u64) -> Metrics {
    Metrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
    }
}

/// Dataset-level evaluation result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MetricsReport {
    pub fn new(counts: ConfusionCounts, threshold: f64) -> Self {
        let m = counts.metrics();
        Self {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            iou: m.iou,
            threshold,
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            tn: counts.tn,
        }
    }

    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    /// `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "f1={}", self.f1);
        let _ = writeln!(s, "iou={}", self.iou);
        let _ = writeln!(s, "threshold={}", self.threshold);
        let _ = writeln!(s, "tp={}", self.tp);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "fn={}", self.fn_);
        let _ = writeln!(s, "tn={}", self.tn);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([1, 1, v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let target = t(&[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let logits = target.map(|v| if v == 1.0 { 30.0 } else { -30.0 });
        let loss = bce_dice_loss(&logits, &target, 1.0).unwrap();
        assert!(loss.abs() <= 1e-6, "loss {loss}");
        let clamped = target.map(|v| if v == 1.0 { 1e6 } else { -1e6 });
        assert!(bce_dice_loss(&clamped, &target, 1.0).unwrap() <= 1e-6);
    }

    #[test]
    fn dice_worked_example() {
        let d = dice_loss(&[0.5, 0.5], &[1.0, 0.0], 1e-300);
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_binary_targets() {
        let err = bce_dice_loss(&t(&[0.0, 0.0]), &t(&[1.0, 0.5]), 1.0).unwrap_err();
        assert_eq!(err, Error::NonBinaryTarget { index: 1, value: 0.5 });
        assert!(confusion_counts(&t(&[0.0]), &t(&[2.0]), 0.5).is_err());
    }

    #[test]
    fn counts_hand_example() {
        let c = confusion_counts(&t(&[0.9, 0.8, 0.7, 0.1]), &t(&[1.0, 1.0, 0.0, 1.0]), 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 });
        let all = confusion_counts(&t(&[0.9; 5]), &t(&[1.0; 5]), 0.5).unwrap();
        assert_eq!(all, ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 0 });
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = confusion_counts(&t(&[0.5]), &t(&[1.0]), 0.5).unwrap();
        assert_eq!(c.tp, 1);
        assert!(confusion_counts(&t(&[0.5]), &t(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn metrics_worked_examples() {
        let m = metrics_from_counts(2, 1, 1);
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.f1, 2.0 / 3.0);
        assert_eq!(m.iou, 0.5);
        let perfect = metrics_from_counts(7, 0, 0);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.iou), (1.0, 1.0, 1.0, 1.0));
        let empty = metrics_from_counts(0, 0, 5);
        assert_eq!((empty.precision, empty.recall, empty.f1, empty.iou), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(metrics_from_counts(0, 0, 0), Metrics::default());
    }

    #[test]
    fn report_lists_every_key() {
        let r = MetricsReport::new(ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 3 }, 0.5);
        let kv = r.to_key_values();
        let keys: Vec<&str> = kv.lines().map(|l| l.split('=').next().unwrap()).collect();
        assert_eq!(keys, vec!["precision", "recall", "f1", "iou", "threshold", "tp", "fp", "fn", "tn"]);
    }
}
