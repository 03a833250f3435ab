use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure(&mut self, params: &[Tensor<T>]) -> Result<(), TrainError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
            return Ok(());
        }
        if self.m.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "optimizer state has {} slots, got {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (m, p)) in self.m.iter().zip(params).enumerate() {
            if m.len() != p.numel() {
                return Err(TrainError::Shape(format!(
                    "parameter {i} has {} values, optimizer slot has {}",
                    p.numel(),
                    m.len()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from each tensor's accumulated gradient.
/// A tensor without a gradient is treated as having a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    state.ensure(params)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.eps);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().map(<[T]>::to_vec);
        let grad = grad.as_deref();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(T::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
