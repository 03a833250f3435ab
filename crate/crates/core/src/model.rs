//! The full regression model: encoder, gate placements and output heads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encoder_forward, pool_and_head, EncoderConfig, EncoderInput, EncoderWeights, HeadOutput,
    HeadWeights, Nonlexical, PaddingMask,
};
use crate::error::ConfigError;
use crate::mag::{MagConfig, MagWeights};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Everything one forward pass needs besides the weights' layout: the tape,
/// the parameter leaves attached to it, the mode flag and a dropout source.
pub struct Pass<'a, T, R: ?Sized> {
    pub graph: &'a mut Graph<T>,
    pub bound: &'a [Var],
    pub training: bool,
    pub rng: &'a mut R,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Pass<'a, T, R> {
    pub fn new(graph: &'a mut Graph<T>, bound: &'a [Var], training: bool, rng: &'a mut R) -> Self {
        Self {
            graph,
            bound,
            training,
            rng,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mag: MagConfig,
    pub emotion_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.mag.validate(self.encoder.n_layers)?;
        if self.mag.d_model != self.encoder.d_model {
            return Err(ConfigError::new(format!(
                "mag.d_model ({}) differs from encoder.d_model ({})",
                self.mag.d_model, self.encoder.d_model
            )));
        }
        Ok(())
    }

    /// Copies shared settings so the encoder and gate agree.
    pub fn with_data_dims(mut self, vocab_size: usize, d_visual: usize, d_acoustic: usize) -> Self {
        self.encoder.vocab_size = vocab_size;
        self.mag.d_model = self.encoder.d_model;
        self.mag.d_visual = d_visual;
        self.mag.d_acoustic = d_acoustic;
        self
    }
}

/// One instance ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub ids: Vec<usize>,
    pub mask: PaddingMask,
    pub visual: Tensor<T>,
    pub acoustic: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub intensity: T,
    pub emotions: Option<[T; crate::encoder::N_EMOTIONS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    encoder: EncoderWeights,
    mags: BTreeMap<usize, MagWeights>,
    head: HeadWeights,
}

impl<T: Scalar> Model<T> {
    /// Fresh weights drawn from a xoshiro256** stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = EncoderWeights::register(&mut params, &config.encoder, &mut rng);
        let mags = config
            .mag
            .apply_at_layers
            .iter()
            .map(|&l| {
                (
                    l,
                    MagWeights::register(&mut params, &format!("mag{l}"), &config.mag, &mut rng),
                )
            })
            .collect();
        let head = HeadWeights::register(
            &mut params,
            config.encoder.d_model,
            config.emotion_head,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            mags,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `(encoder, gate)` dropout probabilities.
    pub fn dropout(&self) -> (f64, f64) {
        (self.config.encoder.dropout_p, self.config.mag.dropout_p)
    }

    pub fn set_dropout(&mut self, encoder: f64, gate: f64) {
        self.config.encoder.dropout_p = encoder;
        self.config.mag.dropout_p = gate;
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn encoder_weights(&self) -> &EncoderWeights {
        &self.encoder
    }

    pub fn mag_weights(&self) -> &BTreeMap<usize, MagWeights> {
        &self.mags
    }

    pub fn head_weights(&self) -> &HeadWeights {
        &self.head
    }

    /// Replaces every weight, checking names and shapes against this model.
    pub fn load_params(
        &mut self,
        names: &[String],
        tensors: Vec<Tensor<T>>,
    ) -> Result<(), ConfigError> {
        if names.len() != self.params.len() || tensors.len() != names.len() {
            return Err(ConfigError::new(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                names.len()
            )));
        }
        for (i, (name, t)) in names.iter().zip(&tensors).enumerate() {
            let want = &self.params.names()[i];
            if want != name {
                return Err(ConfigError::new(format!(
                    "parameter {i} is '{name}', model expects '{want}'"
                )));
            }
            let have = self.params.tensors()[i].shape();
            if have != t.shape() {
                return Err(ConfigError::new(format!(
                    "parameter '{name}' has shape {:?}, model expects {have:?}",
                    t.shape()
                )));
            }
        }
        for (dst, src) in self.params.tensors_mut().iter_mut().zip(tensors) {
            *dst = src;
        }
        Ok(())
    }

    /// Records a forward pass for one instance. `use_nonlexical = false`
    /// runs the text-only path.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        pass: &mut Pass<'_, T, R>,
        input: &ModelInput<T>,
        use_nonlexical: bool,
    ) -> Result<HeadOutput, TensorError> {
        let len = input.ids.len();
        if input.visual.dims2().0 != len || input.acoustic.dims2().0 != len {
            return Err(TensorError::invalid(
                "forward",
                format!(
                    "{len} tokens but {} visual and {} acoustic rows",
                    input.visual.dims2().0,
                    input.acoustic.dims2().0
                ),
            ));
        }
        let nonlexical = if use_nonlexical && self.config.mag.enabled() {
            Some(Nonlexical {
                visual: pass.graph.leaf(input.visual.clone())?,
                acoustic: pass.graph.leaf(input.acoustic.clone())?,
            })
        } else {
            None
        };
        let enc_input = EncoderInput {
            ids: &input.ids,
            mask: &input.mask,
            nonlexical,
        };
        let encoded = encoder_forward(
            pass,
            &self.encoder,
            &self.config.encoder,
            &self.mags,
            &self.config.mag,
            &enc_input,
        )?;
        pool_and_head(pass, &self.head, encoded, &input.mask)
    }

    /// Eval-mode prediction on a private graph.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Prediction<T>, TensorError> {
        let mut g = Graph::new();
        let bound = self.params.attach(&mut g)?;
        // eval mode never draws from the rng
        let mut rng = Xoshiro256StarStar::seed_from_u64(0);
        let mut pass = Pass::new(&mut g, &bound, false, &mut rng);
        let out = self.forward(&mut pass, input, true)?;
        Ok(read_prediction(&g, out))
    }
}

pub(crate) fn read_prediction<T: Scalar>(g: &Graph<T>, out: HeadOutput) -> Prediction<T> {
    let intensity = g.value(out.intensity).data()[0];
    let emotions = out.emotions.map(|e| {
        let mut arr = [T::zero(); crate::encoder::N_EMOTIONS];
        arr.copy_from_slice(g.value(e).data());
        arr
    });
    Prediction {
        intensity,
        emotions,
    }
}
