//! Multimodal adaptation gate.
//!
//! For every word position `i` the gate turns the aligned visual and
//! acoustic vectors into a displacement and adds it to the lexical hidden
//! state, scaled so the displacement can never outgrow the lexical vector:
//!
//! ```text
//! g_v = relu([h_i ; v_i]·W_gv + b_gv)
//! g_a = relu([h_i ; a_i]·W_ga + b_ga)
//! H_i = g_v ⊙ (v_i·W_v) + g_a ⊙ (a_i·W_a) + b_H
//! α_i = min(β·‖h_i‖ / (‖H_i‖ + ε), 1)
//! out_i = dropout(layer_norm(h_i + α_i·H_i))
//! ```
//!
//! With `lexical_in_gate` off, `h_i` is replaced by zeros inside the two
//! gate inputs only.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::params::{self, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, Var};
use crate::Pass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagConfig {
    pub d_model: usize,
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub beta: f64,
    pub eps: f64,
    pub dropout_p: f64,
    /// Encoder layers whose input hidden state is shifted. Empty disables MAG.
    pub apply_at_layers: BTreeSet<usize>,
    pub lexical_in_gate: bool,
}

impl Default for MagConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_visual: 4,
            d_acoustic: 3,
            beta: 1.0,
            eps: 1e-6,
            dropout_p: 0.5,
            apply_at_layers: BTreeSet::from([0]),
            lexical_in_gate: true,
        }
    }
}

impl MagConfig {
    pub fn validate(&self, n_layers: usize) -> Result<(), ConfigError> {
        if self.d_model == 0 || self.d_visual == 0 || self.d_acoustic == 0 {
            return Err(ConfigError::new("mag dimensions must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ConfigError::new(format!(
                "mag.beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(ConfigError::new(format!(
                "mag.eps must be > 0, got {}",
                self.eps
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ConfigError::new(format!(
                "mag.dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if let Some(&l) = self.apply_at_layers.iter().find(|&&l| l >= n_layers) {
            return Err(ConfigError::new(format!(
                "mag.apply_at_layers contains {l}, encoder has {n_layers} layers"
            )));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        !self.apply_at_layers.is_empty()
    }
}

/// Fusion parameters of one gate placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagWeights {
    pub w_gv: ParamId,
    pub b_gv: ParamId,
    pub w_ga: ParamId,
    pub b_ga: ParamId,
    pub w_v: ParamId,
    pub w_a: ParamId,
    pub b_h: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl MagWeights {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        cfg: &MagConfig,
        rng: &mut R,
    ) -> Self {
        let (d, dv, da) = (cfg.d_model, cfg.d_visual, cfg.d_acoustic);
        let mut reg = |name: &str, t: Tensor<T>| params.register(format!("{prefix}.{name}"), t);
        Self {
            w_gv: reg("w_gv", params::xavier(d + dv, d, rng)),
            b_gv: reg("b_gv", params::zeros(d)),
            w_ga: reg("w_ga", params::xavier(d + da, d, rng)),
            b_ga: reg("b_ga", params::zeros(d)),
            w_v: reg("w_v", params::xavier(dv, d, rng)),
            w_a: reg("w_a", params::xavier(da, d, rng)),
            b_h: reg("b_h", params::zeros(d)),
            ln_gain: reg("ln_gain", params::ones(d)),
            ln_bias: reg("ln_bias", params::zeros(d)),
        }
    }
}

/// Cap on the displacement: `min(β·‖h‖ / (‖H‖ + ε), 1)`.
pub fn shift_magnitude<T: Scalar>(h: &[T], displacement: &[T], beta: T, eps: T) -> T {
    let nh = crate::tensor::l2(h);
    let nd = crate::tensor::l2(displacement);
    let ratio = beta * nh / (nd + eps);
    if ratio < T::one() {
        ratio
    } else {
        T::one()
    }
}

fn check_inputs<T: Scalar, R: Rng + ?Sized>(
    pass: &Pass<'_, T, R>,
    cfg: &MagConfig,
    h: Var,
    v: Var,
    a: Var,
) -> Result<(), TensorError> {
    let g = &*pass.graph;
    let (lh, dh) = g.value(h).dims2();
    let (lv, dv) = g.value(v).dims2();
    let (la, da) = g.value(a).dims2();
    if lh != lv || lh != la {
        return Err(TensorError::invalid(
            "mag_forward",
            format!("sequence lengths differ: lexical {lh}, visual {lv}, acoustic {la}"),
        ));
    }
    if dh != cfg.d_model || dv != cfg.d_visual || da != cfg.d_acoustic {
        return Err(TensorError::invalid(
            "mag_forward",
            format!(
                "feature widths ({dh}, {dv}, {da}) do not match config ({}, {}, {})",
                cfg.d_model, cfg.d_visual, cfg.d_acoustic
            ),
        ));
    }
    Ok(())
}

/// Visual and acoustic gate activations `(g_v, g_a)`, each `L×d_model`.
pub fn mag_gates<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &MagWeights,
    cfg: &MagConfig,
    h: Var,
    v: Var,
    a: Var,
) -> Result<(Var, Var), TensorError> {
    check_inputs(pass, cfg, h, v, a)?;
    let lexical = if cfg.lexical_in_gate {
        h
    } else {
        let (l, d) = pass.graph.value(h).dims2();
        pass.graph.leaf(Tensor::zeros(vec![l, d]))?
    };
    let b = pass.bound;
    let g = &mut *pass.graph;
    let hv = g.concat_last(lexical, v)?;
    let gv = g.matmul(hv, w.w_gv.var(b))?;
    let gv = g.add_row(gv, w.b_gv.var(b))?;
    let gv = g.relu(gv)?;
    let ha = g.concat_last(lexical, a)?;
    let ga = g.matmul(ha, w.w_ga.var(b))?;
    let ga = g.add_row(ga, w.b_ga.var(b))?;
    let ga = g.relu(ga)?;
    Ok((gv, ga))
}

/// Gated displacement `H` before the cap.
pub fn displacement<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &MagWeights,
    cfg: &MagConfig,
    h: Var,
    v: Var,
    a: Var,
) -> Result<Var, TensorError> {
    let (gv, ga) = mag_gates(pass, w, cfg, h, v, a)?;
    let b = pass.bound;
    let g = &mut *pass.graph;
    let pv = g.matmul(v, w.w_v.var(b))?;
    let pv = g.mul(gv, pv)?;
    let pa = g.matmul(a, w.w_a.var(b))?;
    let pa = g.mul(ga, pa)?;
    let disp = g.add(pv, pa)?;
    g.add_row(disp, w.b_h.var(b))
}

/// Applies the gate to lexical states `h` (`L×d_model`) given aligned
/// visual `v` (`L×d_visual`) and acoustic `a` (`L×d_acoustic`) streams.
pub fn mag_forward<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &MagWeights,
    cfg: &MagConfig,
    h: Var,
    v: Var,
    a: Var,
) -> Result<Var, TensorError> {
    let disp = displacement(pass, w, cfg, h, v, a)?;
    let b = pass.bound;
    let g = &mut *pass.graph;
    let h_norm = g.row_l2_norm(h)?;
    let d_norm = g.row_l2_norm(disp)?;
    let num = g.scale(h_norm, T::from_f64_lossy(cfg.beta))?;
    let den = g.add_scalar(d_norm, T::from_f64_lossy(cfg.eps))?;
    let ratio = g.div(num, den)?;
    let alpha = g.min_scalar(ratio, T::one())?;
    let shift = g.scale_rows(disp, alpha)?;
    let shifted = g.add(h, shift)?;
    let normed = g.layer_norm(
        shifted,
        w.ln_gain.var(b),
        w.ln_bias.var(b),
        T::from_f64_lossy(crate::encoder::LAYER_NORM_EPS),
    )?;
    g.dropout(normed, cfg.dropout_p, &mut *pass.rng, pass.training)
}
