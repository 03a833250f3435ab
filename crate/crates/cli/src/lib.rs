//! Library side of the `magfuse` command-line tool. The binary only parses
//! arguments, calls [`run`] and maps failures to exit codes.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use config::{EvalConfig, GenRunConfig, HighlightRunConfig, RunConfig};
pub use error::{CliError, ErrorClass};

#[derive(Debug, Parser)]
#[command(
    name = "magfuse",
    version,
    about = "Gated multimodal fusion on a small transformer encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus or a long stream with planted spans.
    Gen(GenArgs),
    /// Train a model on a JSONL corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL corpus.
    Eval(EvalArgs),
    /// Find high-intensity segments in a long stream.
    Highlight(HighlightArgs),
}

/// Options every subcommand accepts.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON config file; explicit flags and --set win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as train.epochs=5; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory, created if absent.
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of utterances.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub w_text: Option<f64>,
    #[arg(long)]
    pub w_visual: Option<f64>,
    #[arg(long)]
    pub w_acoustic: Option<f64>,
    /// Standard deviation of the feature noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub d_visual: Option<usize>,
    #[arg(long)]
    pub d_acoustic: Option<usize>,
    /// Attach emotion vectors.
    #[arg(long)]
    pub emotions: bool,
    /// Emit one stream of this many steps instead of a corpus.
    #[arg(long)]
    pub stream_len: Option<usize>,
    /// Steps per background utterance in a stream.
    #[arg(long, requires = "stream_len")]
    pub chunk_len: Option<usize>,
    #[arg(long, requires = "stream_len")]
    pub step_seconds: Option<f64>,
    /// Planted span START:LEN:INTENSITY; repeatable.
    #[arg(
        long = "span",
        requires = "stream_len",
        value_name = "START:LEN:INTENSITY"
    )]
    pub spans: Vec<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSONL corpus; split into train/val/test by the split settings.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Zero the visual and acoustic streams before predicting.
    #[arg(long)]
    pub text_only: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct HighlightArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL file holding exactly one long instance.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Absolute score threshold.
    #[arg(long, conflicts_with = "quantile")]
    pub threshold: Option<f64>,
    /// Derive the threshold from this quantile of the stream's scores.
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Lowest threshold a quantile may resolve to.
    #[arg(long, requires = "quantile")]
    pub min_score: Option<f64>,
    /// Score signed intensity instead of its magnitude.
    #[arg(long)]
    pub positive_only: bool,
    #[arg(long)]
    pub min_gap: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
}

/// Runs one subcommand and returns the JSON document it prints.
pub fn run(cli: Cli) -> Result<Value, CliError> {
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Highlight(a) => commands::highlight(&a),
    }
}
