//! Mini-batch training with Adam, per-epoch validation and best-epoch
//! selection by validation MAE.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Manifest, ParamEntry,
    CHECKPOINT_FORMAT_VERSION, MANIFEST_FILE, WEIGHTS_FILE,
};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Splits};
use crate::encoder::N_EMOTIONS;
use crate::error::ConfigError;
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{read_prediction, Model, ModelInput, Pass};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("optimizer shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mae,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Applied to every dropout site of the model for the run.
    pub dropout_p: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-5,
            dropout_p: 0.5,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            loss: LossKind::Mae,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::new("train.epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::new(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::new("train.batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ConfigError::new(format!(
                "train.dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let mut s =
            String::from("epoch,train_loss,val_accuracy,val_f1,val_mae,val_corr,wall_time_s\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                opt(r.val.accuracy),
                opt(r.val.f1),
                r.val.mae,
                opt(r.val.corr),
                r.wall_time_s
            ));
        }
        s
    }

    /// Epoch with the lowest validation MAE (earliest on ties).
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val.mae <= r.val.mae => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub best_epoch: usize,
    pub optimizer_steps: u64,
}

struct Example<T> {
    input: ModelInput<T>,
    label: T,
    emotions: Option<[T; N_EMOTIONS]>,
}

fn examples<T: Scalar>(corpus: &Corpus) -> Vec<Example<T>> {
    corpus
        .instances
        .iter()
        .map(|inst| Example {
            input: corpus.encode(inst),
            label: T::from_f64_lossy(inst.label),
            emotions: inst.emotions.map(|e| e.map(T::from_f64_lossy)),
        })
        .collect()
}

fn check_dims<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<(), TrainError> {
    let cfg = model.config();
    if cfg.mag.d_visual != corpus.d_visual || cfg.mag.d_acoustic != corpus.d_acoustic {
        return Err(TrainError::DimMismatch(format!(
            "model expects visual/acoustic widths {}/{}, data has {}/{}",
            cfg.mag.d_visual, cfg.mag.d_acoustic, corpus.d_visual, corpus.d_acoustic
        )));
    }
    if cfg.encoder.vocab_size < corpus.vocab.len() {
        return Err(TrainError::DimMismatch(format!(
            "model vocabulary holds {} tokens, data vocabulary has {}",
            cfg.encoder.vocab_size,
            corpus.vocab.len()
        )));
    }
    if let Some(inst) = corpus
        .instances
        .iter()
        .find(|i| i.len() > cfg.encoder.max_seq_len)
    {
        return Err(TrainError::DimMismatch(format!(
            "instance '{}' has {} words, max_seq_len is {}",
            inst.id,
            inst.len(),
            cfg.encoder.max_seq_len
        )));
    }
    Ok(())
}

/// Loss of one instance: MAE or squared error on the intensity, plus the
/// mean absolute emotion error when both the head and the targets exist.
fn record_loss<T: Scalar, R: rand::Rng + ?Sized>(
    model: &Model<T>,
    pass: &mut Pass<'_, T, R>,
    ex: &Example<T>,
    loss: LossKind,
) -> Result<crate::tensor::Var, TensorError> {
    let out = model.forward(pass, &ex.input, true)?;
    let g = &mut *pass.graph;
    let target = g.leaf(Tensor::filled(vec![1, 1], ex.label))?;
    let diff = g.sub(out.intensity, target)?;
    let mut total = match loss {
        LossKind::Mae => g.abs(diff)?,
        LossKind::Mse => g.mul(diff, diff)?,
    };
    total = g.sum(total)?;
    if let (Some(pred), Some(e)) = (out.emotions, ex.emotions) {
        let target = g.leaf(Tensor::from_parts(vec![1, N_EMOTIONS], e.to_vec()))?;
        let d = g.sub(pred, target)?;
        let d = g.abs(d)?;
        let d = g.mean(d)?;
        total = g.add(total, d)?;
    }
    Ok(total)
}

/// Trains in place. On return the model holds the weights of the epoch
/// with the lowest validation MAE.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if splits.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    check_dims(model, &splits.train)?;
    check_dims(model, &splits.val)?;

    let train_set = examples::<T>(&splits.train);
    let mut shuffle_rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let mut dropout_rng =
        Xoshiro256StarStar::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut state = AdamState::new();
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let saved_dropout = model.dropout();
    model.set_dropout(cfg.dropout_p, cfg.dropout_p);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let share = T::one() / T::from_usize_lossy(chunk.len());
            let mut g = Graph::new();
            let bound = model.params().attach(&mut g)?;
            let base = g.len();
            for &i in chunk {
                g.truncate(base);
                let mut pass = Pass::new(&mut g, &bound, true, &mut dropout_rng);
                let loss =
                    record_loss(model, &mut pass, &train_set[i], cfg.loss).map_err(
                        |e| match e {
                            TensorError::NonFinite { op } => TrainError::NonFinite {
                                epoch,
                                batch,
                                detail: format!("{op} produced a non-finite value"),
                            },
                            other => TrainError::Tensor(other),
                        },
                    )?;
                let value = g.value(loss).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch,
                        detail: format!("loss {value}"),
                    });
                }
                loss_sum += value;
                let scaled = g.scale(loss, share)?;
                g.backward(scaled)?;
            }
            model.params_mut().zero_grads();
            model.params_mut().collect_grads(&g, &bound);
            adam_step(model.params_mut().tensors_mut(), &mut state, &adam)?;
            if model.params().tensors().iter().any(|t| !t.is_all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    detail: "parameters diverged".into(),
                });
            }
        }
        let val = evaluate(model, &splits.val)?;
        let val_mae = val.mae;
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(m, _, _)| val_mae < *m) {
            best = Some((val_mae, epoch, model.params().tensors().to_vec()));
        }
    }
    model.params_mut().zero_grads();
    model.set_dropout(saved_dropout.0, saved_dropout.1);
    let (_, best_epoch, weights) = best.expect("at least one epoch ran");
    for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(weights) {
        *dst = src;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        optimizer_steps: state.t,
    })
}

/// Eval-mode intensity predictions, in corpus order.
pub fn predict_corpus<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<Vec<T>, TensorError> {
    corpus
        .instances
        .iter()
        .map(|inst| model.predict(&corpus.encode(inst)).map(|p| p.intensity))
        .collect()
}

/// Eval-mode metrics over a corpus, including per-emotion MAE when the
/// model has an emotion head and instances carry emotion targets.
pub fn evaluate<T: Scalar>(model: &Model<T>, corpus: &Corpus) -> Result<MetricsReport, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Metrics(MetricsError::Empty));
    }
    let mut g = Graph::new();
    let bound = model.params().attach(&mut g)?;
    let base = g.len();
    let mut rng = Xoshiro256StarStar::seed_from_u64(0);
    let mut preds = Vec::with_capacity(corpus.len());
    let mut emotion_pairs = Vec::new();
    for inst in &corpus.instances {
        let input = corpus.encode::<T>(inst);
        // reuse the attached parameters; drop the previous instance's nodes
        g.truncate(base);
        let mut pass = Pass::new(&mut g, &bound, false, &mut rng);
        let out = model.forward(&mut pass, &input, true)?;
        let p = read_prediction(&g, out);
        preds.push(p.intensity);
        if let (Some(pe), Some(te)) = (p.emotions, inst.emotions) {
            emotion_pairs.push((pe, te.map(T::from_f64_lossy)));
        }
    }
    let labels: Vec<T> = corpus
        .instances
        .iter()
        .map(|i| T::from_f64_lossy(i.label))
        .collect();
    Ok(MetricsReport::compute(&preds, &labels)?.with_emotions(&emotion_pairs)?)
}
