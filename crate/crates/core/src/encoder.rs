//! Small post-norm transformer encoder with two position-encoding variants.
//!
//! `Absolute` adds learned position embeddings to the token embeddings.
//! `RelativeBias` leaves embeddings position-free and instead adds a learned
//! per-head bias `b[i − j]` (distance clipped to `±max_seq_len`) to the
//! attention logits.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::mag::{mag_forward, MagConfig, MagWeights};
use crate::params::{self, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError, Var};
use crate::Pass;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// BERT-style learned absolute positions.
    Absolute,
    /// XLNet-style relative attention bias.
    RelativeBias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub variant: PositionEncoding,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ff: 64,
            max_seq_len: 64,
            variant: PositionEncoding::Absolute,
            dropout_p: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::new(format!("encoder.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::new(format!(
                "encoder.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ConfigError::new(format!(
                "encoder.dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// `true` marks a real token, `false` padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddingMask(Vec<bool>);

impl PaddingMask {
    pub fn new(real: Vec<bool>) -> Result<Self, TensorError> {
        if !real.iter().any(|&b| b) {
            return Err(TensorError::invalid("padding_mask", "no real positions"));
        }
        Ok(Self(real))
    }

    pub fn all_real(len: usize) -> Self {
        Self(vec![true; len.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn n_real(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    /// `n_heads × (2·max_seq_len + 1)`, relative variant only.
    pub rel_bias: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub token: ParamId,
    pub position: Option<ParamId>,
    pub emb_ln_gain: ParamId,
    pub emb_ln_bias: ParamId,
    pub layers: Vec<LayerWeights>,
}

impl EncoderWeights {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let token = ps.register(
            "embed.token",
            params::normal(vec![cfg.vocab_size, d], 0.1, rng),
        );
        let position = (cfg.variant == PositionEncoding::Absolute).then(|| {
            ps.register(
                "embed.position",
                params::normal(vec![cfg.max_seq_len, d], 0.1, rng),
            )
        });
        let emb_ln_gain = ps.register("embed.ln_gain", params::ones(d));
        let emb_ln_bias = ps.register("embed.ln_bias", params::zeros(d));
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("layer{l}");
                let attn = AttentionWeights {
                    wq: ps.register(format!("{p}.attn.wq"), params::xavier(d, d, rng)),
                    bq: ps.register(format!("{p}.attn.bq"), params::zeros(d)),
                    wk: ps.register(format!("{p}.attn.wk"), params::xavier(d, d, rng)),
                    bk: ps.register(format!("{p}.attn.bk"), params::zeros(d)),
                    wv: ps.register(format!("{p}.attn.wv"), params::xavier(d, d, rng)),
                    bv: ps.register(format!("{p}.attn.bv"), params::zeros(d)),
                    wo: ps.register(format!("{p}.attn.wo"), params::xavier(d, d, rng)),
                    bo: ps.register(format!("{p}.attn.bo"), params::zeros(d)),
                    rel_bias: (cfg.variant == PositionEncoding::RelativeBias).then(|| {
                        ps.register(
                            format!("{p}.attn.rel_bias"),
                            Tensor::zeros(vec![cfg.n_heads, 2 * cfg.max_seq_len + 1]),
                        )
                    }),
                };
                LayerWeights {
                    attn,
                    ln1_gain: ps.register(format!("{p}.ln1_gain"), params::ones(d)),
                    ln1_bias: ps.register(format!("{p}.ln1_bias"), params::zeros(d)),
                    ff_w1: ps.register(format!("{p}.ff.w1"), params::xavier(d, cfg.d_ff, rng)),
                    ff_b1: ps.register(format!("{p}.ff.b1"), params::zeros(cfg.d_ff)),
                    ff_w2: ps.register(format!("{p}.ff.w2"), params::xavier(cfg.d_ff, d, rng)),
                    ff_b2: ps.register(format!("{p}.ff.b2"), params::zeros(d)),
                    ln2_gain: ps.register(format!("{p}.ln2_gain"), params::ones(d)),
                    ln2_bias: ps.register(format!("{p}.ln2_bias"), params::zeros(d)),
                }
            })
            .collect();
        Self {
            token,
            position,
            emb_ln_gain,
            emb_ln_bias,
            layers,
        }
    }
}

/// Token (plus, for the absolute variant, position) embeddings: `L×d_model`.
pub fn embed<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    ids: &[usize],
) -> Result<Var, TensorError> {
    if ids.is_empty() {
        return Err(TensorError::invalid("embed", "empty token sequence"));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(TensorError::invalid(
            "embed",
            format!(
                "sequence length {} exceeds max_seq_len {}",
                ids.len(),
                cfg.max_seq_len
            ),
        ));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(TensorError::invalid(
            "embed",
            format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            ),
        ));
    }
    let b = pass.bound;
    let g = &mut *pass.graph;
    let tokens = g.gather_rows(w.token.var(b), ids)?;
    match w.position {
        Some(pos) => {
            let positions: Vec<usize> = (0..ids.len()).collect();
            let p = g.gather_rows(pos.var(b), &positions)?;
            g.add(tokens, p)
        }
        None => Ok(tokens),
    }
}

/// Multi-head scaled dot-product self-attention. Returns the projected
/// output and each head's `L×L` attention weights.
pub fn attention_with_weights<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &AttentionWeights,
    cfg: &EncoderConfig,
    x: Var,
    mask: &PaddingMask,
) -> Result<(Var, Vec<Var>), TensorError> {
    let (len, d) = pass.graph.value(x).dims2();
    if d != cfg.d_model {
        return Err(TensorError::invalid(
            "attention",
            format!("hidden width {d}, expected {}", cfg.d_model),
        ));
    }
    if mask.len() != len {
        return Err(TensorError::invalid(
            "attention",
            format!("mask length {} for sequence of {len}", mask.len()),
        ));
    }
    if mask.n_real() == 0 {
        return Err(TensorError::invalid(
            "attention",
            "all positions are padding",
        ));
    }
    let b = pass.bound;
    let g = &mut *pass.graph;
    let mut project = |wm: ParamId, bv: ParamId| -> Result<Var, TensorError> {
        let y = g.matmul(x, wm.var(b))?;
        g.add_row(y, bv.var(b))
    };
    let q = project(w.wq, w.bq)?;
    let k = project(w.wk, w.bk)?;
    let v = project(w.wv, w.bv)?;
    let dh = cfg.head_dim();
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut weights = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let mut logits = g.scale(logits, scale)?;
        if let Some(table) = w.rel_bias {
            let bias = g.relative_bias(table.var(b), h, len, cfg.max_seq_len)?;
            logits = g.add(logits, bias)?;
        }
        let p = g.softmax_rows(logits, Some(mask.as_slice()))?;
        heads.push(g.matmul(p, vh)?);
        weights.push(p);
    }
    let mut merged = heads[0];
    for &h in &heads[1..] {
        merged = g.concat_last(merged, h)?;
    }
    let out = g.matmul(merged, w.wo.var(b))?;
    Ok((g.add_row(out, w.bo.var(b))?, weights))
}

pub fn attention<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &AttentionWeights,
    cfg: &EncoderConfig,
    x: Var,
    mask: &PaddingMask,
) -> Result<Var, TensorError> {
    attention_with_weights(pass, w, cfg, x, mask).map(|(out, _)| out)
}

/// attention → add & norm → feed-forward → add & norm.
pub fn encoder_layer<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &LayerWeights,
    cfg: &EncoderConfig,
    x: Var,
    mask: &PaddingMask,
) -> Result<Var, TensorError> {
    let attn = attention(pass, &w.attn, cfg, x, mask)?;
    let b = pass.bound;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let g = &mut *pass.graph;
    let attn = g.dropout(attn, cfg.dropout_p, &mut *pass.rng, pass.training)?;
    let res = g.add(x, attn)?;
    let h = g.layer_norm(res, w.ln1_gain.var(b), w.ln1_bias.var(b), eps)?;
    let f = g.matmul(h, w.ff_w1.var(b))?;
    let f = g.add_row(f, w.ff_b1.var(b))?;
    let f = g.relu(f)?;
    let f = g.matmul(f, w.ff_w2.var(b))?;
    let f = g.add_row(f, w.ff_b2.var(b))?;
    let f = g.dropout(f, cfg.dropout_p, &mut *pass.rng, pass.training)?;
    let res = g.add(h, f)?;
    g.layer_norm(res, w.ln2_gain.var(b), w.ln2_bias.var(b), eps)
}

/// Word-aligned visual (`L×d_visual`) and acoustic (`L×d_acoustic`) streams.
#[derive(Debug, Clone, Copy)]
pub struct Nonlexical {
    pub visual: Var,
    pub acoustic: Var,
}

pub struct EncoderInput<'a> {
    pub ids: &'a [usize],
    pub mask: &'a PaddingMask,
    /// `None` runs the text-only path: gate sites reduce to their layer norm
    /// and dropout, exactly what the gate computes for a zero displacement.
    pub nonlexical: Option<Nonlexical>,
}

/// Full encoder stack with the gate applied to the hidden state entering
/// every layer listed in `mag_cfg.apply_at_layers`.
pub fn encoder_forward<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &EncoderWeights,
    cfg: &EncoderConfig,
    mags: &BTreeMap<usize, MagWeights>,
    mag_cfg: &MagConfig,
    input: &EncoderInput<'_>,
) -> Result<Var, TensorError> {
    if input.mask.len() != input.ids.len() {
        return Err(TensorError::invalid(
            "encoder_forward",
            format!(
                "mask length {} for {} tokens",
                input.mask.len(),
                input.ids.len()
            ),
        ));
    }
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let e = embed(pass, w, cfg, input.ids)?;
    let b = pass.bound;
    let e = pass
        .graph
        .layer_norm(e, w.emb_ln_gain.var(b), w.emb_ln_bias.var(b), eps)?;
    let mut h = pass
        .graph
        .dropout(e, cfg.dropout_p, &mut *pass.rng, pass.training)?;
    for (l, lw) in w.layers.iter().enumerate() {
        if let Some(mw) = mags.get(&l) {
            h = match input.nonlexical {
                Some(nl) => mag_forward(pass, mw, mag_cfg, h, nl.visual, nl.acoustic)?,
                None => {
                    let g = &mut *pass.graph;
                    let n = g.layer_norm(h, mw.ln_gain.var(b), mw.ln_bias.var(b), eps)?;
                    g.dropout(n, mag_cfg.dropout_p, &mut *pass.rng, pass.training)?
                }
            };
        }
        h = encoder_layer(pass, lw, cfg, h, input.mask)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w: ParamId,
    pub b: ParamId,
    pub emotion: Option<(ParamId, ParamId)>,
}

pub const N_EMOTIONS: usize = 6;

impl HeadWeights {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        d_model: usize,
        emotion_head: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.register("head.w", params::xavier(d_model, 1, rng));
        let b = ps.register("head.b", params::zeros(1));
        let emotion = emotion_head.then(|| {
            (
                ps.register("emotion.w", params::xavier(d_model, N_EMOTIONS, rng)),
                ps.register("emotion.b", params::zeros(N_EMOTIONS)),
            )
        });
        Self { w, b, emotion }
    }
}

/// Scalar intensity (`1×1`) and, when configured, six nonnegative emotion
/// scores (`1×6`).
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub intensity: Var,
    pub emotions: Option<Var>,
}

/// Mean over real positions followed by the affine regression head.
pub fn pool_and_head<T: Scalar, R: Rng + ?Sized>(
    pass: &mut Pass<'_, T, R>,
    w: &HeadWeights,
    encoded: Var,
    mask: &PaddingMask,
) -> Result<HeadOutput, TensorError> {
    let (len, _) = pass.graph.value(encoded).dims2();
    if mask.len() != len {
        return Err(TensorError::invalid(
            "pool_and_head",
            format!("mask length {} for sequence of {len}", mask.len()),
        ));
    }
    let n_real = mask.n_real();
    if n_real == 0 {
        return Err(TensorError::invalid(
            "pool_and_head",
            "all positions are padding",
        ));
    }
    let share = T::one() / T::from_usize_lossy(n_real);
    let pool_row: Vec<T> = mask
        .as_slice()
        .iter()
        .map(|&r| if r { share } else { T::zero() })
        .collect();
    let b = pass.bound;
    let g = &mut *pass.graph;
    let pool = g.leaf(Tensor::from_parts(vec![1, len], pool_row))?;
    let pooled = g.matmul(pool, encoded)?;
    let y = g.matmul(pooled, w.w.var(b))?;
    let intensity = g.add_row(y, w.b.var(b))?;
    let emotions = match w.emotion {
        Some((ew, eb)) => {
            let e = g.matmul(pooled, ew.var(b))?;
            let e = g.add_row(e, eb.var(b))?;
            Some(g.relu(e)?)
        }
        None => None,
    };
    Ok(HeadOutput {
        intensity,
        emotions,
    })
}
