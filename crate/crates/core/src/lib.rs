//! Multimodal Adaptation Gate fusion in a small transformer encoder.
//!
//! Word-aligned visual and acoustic features shift the lexical hidden
//! states of chosen encoder layers. The crate carries its own reverse-mode
//! autodiff tape, so the whole model trains from scratch on the CPU. All
//! numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are the configuration the command-line tool uses.

pub mod data;
pub mod encoder;
pub mod error;
pub mod highlight;
pub mod mag;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use data::{Corpus, DataError, MultimodalInstance, SplitSpec, Splits, Vocabulary};
pub use encoder::{EncoderConfig, PaddingMask, PositionEncoding};
pub use error::{ConfigError, Error, Result};
pub use highlight::{HighlightConfig, HighlightError, HighlightSegment, Threshold};
pub use mag::MagConfig;
pub use metrics::{MetricsError, MetricsReport};
pub use model::{Model, ModelConfig, ModelInput, Pass, Prediction};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, TensorError, Var};
pub use train::{CheckpointError, RunLog, TrainConfig, TrainError, TrainOutcome};

pub type Tensor64 = Tensor<f64>;
pub type Graph64 = Graph<f64>;
pub type Model64 = Model<f64>;
pub type ModelInput64 = ModelInput<f64>;

pub type Tensor32 = Tensor<f32>;
pub type Graph32 = Graph<f32>;
pub type Model32 = Model<f32>;
pub type ModelInput32 = ModelInput<f32>;
