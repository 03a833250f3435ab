//! Failure classes and their process exit codes.

use std::fmt;
use std::io;
use std::path::Path;

use magfuse::data::DataError;
use magfuse::highlight::HighlightError;
use magfuse::train::{CheckpointError, TrainError};
use magfuse::{ConfigError, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid flags, config files or override values.
    Config,
    /// A referenced input file or directory does not exist.
    MissingFile,
    /// An input exists but violates its schema (corpus lines, checkpoints).
    Schema,
    /// Inputs are individually valid but disagree on shapes.
    DimMismatch,
    /// Training or inference produced non-finite values.
    Numeric,
    /// Any other I/O failure, mostly unwritable outputs.
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Io => 1,
            ErrorClass::Config => 2,
            ErrorClass::Schema => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::MissingFile => 5,
            ErrorClass::DimMismatch => 6,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::MissingFile => "data.missing_file",
            ErrorClass::Schema => "data.schema",
            ErrorClass::DimMismatch => "data.dim_mismatch",
            ErrorClass::Numeric => "numeric",
            ErrorClass::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Config, message)
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Schema, message)
    }

    pub fn dims(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::DimMismatch, message)
    }

    /// Classifies a failed read of `path`.
    pub fn read(path: &Path, err: io::Error) -> Self {
        let class = if err.kind() == io::ErrorKind::NotFound {
            ErrorClass::MissingFile
        } else {
            ErrorClass::Io
        };
        Self::new(class, format!("{}: {err}", path.display()))
    }

    pub fn write(path: &Path, err: io::Error) -> Self {
        Self::new(
            ErrorClass::Io,
            format!("cannot write {}: {err}", path.display()),
        )
    }

    pub fn exit_code(&self) -> i32 {
        self.class.exit_code()
    }

    /// The single line printed to stderr on failure.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error[{}]: {}", self.class.tag(), flat.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let class = match &e {
            DataError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => {
                ErrorClass::MissingFile
            }
            DataError::Io { .. } => ErrorClass::Io,
            DataError::InvalidGen(_) | DataError::InvalidSplit(_) | DataError::TooSmall(_) => {
                ErrorClass::Config
            }
            DataError::DimMismatch { .. } => ErrorClass::DimMismatch,
            _ => ErrorClass::Schema,
        };
        Self::new(class, e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        let class = match e {
            TensorError::NonFinite { .. } => ErrorClass::Numeric,
            _ => ErrorClass::DimMismatch,
        };
        Self::new(class, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let class = match &e {
            TrainError::Config(_) => ErrorClass::Config,
            TrainError::DimMismatch(_) | TrainError::Shape(_) => ErrorClass::DimMismatch,
            TrainError::EmptySplit(_) => ErrorClass::Config,
            TrainError::NonFinite { .. } => ErrorClass::Numeric,
            TrainError::Tensor(t) => return Self::from(t.clone()),
            TrainError::Metrics(_) => ErrorClass::Numeric,
        };
        Self::new(class, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let class = match &e {
            CheckpointError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => {
                ErrorClass::MissingFile
            }
            CheckpointError::Io { .. } => ErrorClass::Io,
            CheckpointError::ShapeMismatch { .. } => ErrorClass::DimMismatch,
            CheckpointError::Config(_) => ErrorClass::Config,
            _ => ErrorClass::Schema,
        };
        Self::new(class, format!("checkpoint: {e}"))
    }
}

impl From<HighlightError> for CliError {
    fn from(e: HighlightError) -> Self {
        match e {
            HighlightError::Invalid(msg) => Self::config(msg),
            HighlightError::StreamTooShort { .. } => Self::schema(e.to_string()),
            HighlightError::Tensor(t) => Self::from(t),
        }
    }
}
