//! Binary accuracy, F1, MAE and Pearson correlation.
//!
//! Binary metrics drop instances whose label is exactly zero and treat a
//! prediction of exactly zero as positive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::N_EMOTIONS;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no instances to evaluate")]
    Empty,
    #[error("every label is zero, binary metrics are undefined")]
    AllZeroLabels,
    #[error("correlation is undefined for a constant vector")]
    ConstantInput,
    #[error("correlation needs at least two points")]
    TooFew,
}

fn check_lengths<T>(preds: &[T], labels: &[T]) -> Result<(), MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub excluded: usize,
}

impl Confusion {
    pub fn evaluated(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion<T: Scalar>(preds: &[T], labels: &[T]) -> Result<Confusion, MetricsError> {
    check_lengths(preds, labels)?;
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        if y == T::zero() {
            c.excluded += 1;
            continue;
        }
        match (p >= T::zero(), y > T::zero()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    if c.evaluated() == 0 {
        return Err(MetricsError::AllZeroLabels);
    }
    Ok(c)
}

pub fn binary_accuracy<T: Scalar>(preds: &[T], labels: &[T]) -> Result<T, MetricsError> {
    let c = confusion(preds, labels)?;
    Ok(T::from_usize_lossy(c.tp + c.tn) / T::from_usize_lossy(c.evaluated()))
}

/// `2TP / (2TP + FP + FN)`, positive class `label > 0`; zero when the
/// denominator vanishes.
pub fn f1_binary<T: Scalar>(preds: &[T], labels: &[T]) -> Result<T, MetricsError> {
    let c = confusion(preds, labels)?;
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return Ok(T::zero());
    }
    Ok(T::from_usize_lossy(2 * c.tp) / T::from_usize_lossy(den))
}

pub fn mae<T: Scalar>(preds: &[T], labels: &[T]) -> Result<T, MetricsError> {
    check_lengths(preds, labels)?;
    let total: T = preds.iter().zip(labels).map(|(&p, &y)| (p - y).abs()).sum();
    Ok(total / T::from_usize_lossy(preds.len()))
}

/// Sample Pearson correlation, computed in two passes.
pub fn pearson<T: Scalar>(preds: &[T], labels: &[T]) -> Result<T, MetricsError> {
    check_lengths(preds, labels)?;
    if preds.len() < 2 {
        return Err(MetricsError::TooFew);
    }
    let n = T::from_usize_lossy(preds.len());
    let mx = preds.iter().copied().sum::<T>() / n;
    let my = labels.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in preds.iter().zip(labels) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(MetricsError::ConstantInput);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    // rounding can push |r| a hair past 1
    Ok(r.max(-T::one()).min(T::one()))
}

/// Evaluation summary. Binary metrics are `null` when every label is zero,
/// `corr` when either side is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub mae: f64,
    pub corr: Option<f64>,
    pub n_evaluated: usize,
    pub n_excluded_zero_labels: usize,
    pub emotion_mae: Option<[f64; N_EMOTIONS]>,
}

impl MetricsReport {
    pub fn compute<T: Scalar>(preds: &[T], labels: &[T]) -> Result<Self, MetricsError> {
        let mae = mae(preds, labels)?.to_f64_lossy();
        let (accuracy, f1, n_evaluated, n_excluded) = match confusion(preds, labels) {
            Ok(c) => (
                Some(binary_accuracy(preds, labels)?.to_f64_lossy()),
                Some(f1_binary(preds, labels)?.to_f64_lossy()),
                c.evaluated(),
                c.excluded,
            ),
            Err(MetricsError::AllZeroLabels) => (None, None, 0, preds.len()),
            Err(e) => return Err(e),
        };
        let corr = match pearson(preds, labels) {
            Ok(r) => Some(r.to_f64_lossy()),
            Err(MetricsError::ConstantInput | MetricsError::TooFew) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            accuracy,
            f1,
            mae,
            corr,
            n_evaluated,
            n_excluded_zero_labels: n_excluded,
            emotion_mae: None,
        })
    }

    /// Per-emotion MAE over the `(prediction, target)` pairs given.
    pub fn with_emotions<T: Scalar>(
        mut self,
        pairs: &[([T; N_EMOTIONS], [T; N_EMOTIONS])],
    ) -> Result<Self, MetricsError> {
        if pairs.is_empty() {
            return Ok(self);
        }
        let mut out = [0.0; N_EMOTIONS];
        for (k, slot) in out.iter_mut().enumerate() {
            let p: Vec<T> = pairs.iter().map(|(p, _)| p[k]).collect();
            let y: Vec<T> = pairs.iter().map(|(_, y)| y[k]).collect();
            *slot = mae(&p, &y)?.to_f64_lossy();
        }
        self.emotion_mae = Some(out);
        Ok(self)
    }
}
