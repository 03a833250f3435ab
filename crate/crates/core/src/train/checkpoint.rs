//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! The payload is every parameter, in manifest order, as little-endian
//! IEEE-754 binary64 values with no header or padding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Vocabulary;
use crate::error::ConfigError;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE: &str = "f64le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format version {0} (expected {CHECKPOINT_FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt payload: manifest describes {expected} bytes, weights file has {found}")]
    Corrupt { expected: usize, found: usize },
    #[error("parameter '{name}': checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter layout differs: {0}")]
    Layout(String),
    #[error("parameter '{0}' holds a non-finite value")]
    NonFinite(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
}

impl Manifest {
    pub fn payload_bytes(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>() * 8)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<T>>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    dir: &Path,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        config: model.config().clone(),
        vocabulary: vocab.clone(),
    };
    let mut payload = Vec::with_capacity(manifest.payload_bytes());
    for t in model.params().tensors() {
        for &x in t.data() {
            payload.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(|e| io_err(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, payload).map_err(|e| io_err(&wpath, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    if version != u64::from(CHECKPOINT_FORMAT_VERSION) {
        return Err(CheckpointError::UnsupportedVersion(version as u32));
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.dtype != DTYPE {
        return Err(CheckpointError::Manifest(format!(
            "unknown dtype '{}'",
            manifest.dtype
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| io_err(&wpath, e))?;
    let expected = manifest.payload_bytes();
    if bytes.len() != expected {
        return Err(CheckpointError::Corrupt {
            expected,
            found: bytes.len(),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let n = p.shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).map(T::from_f64_lossy).collect();
        let t = Tensor::new(p.shape.clone(), data)
            .map_err(|_| CheckpointError::NonFinite(p.name.clone()))?;
        tensors.push(t);
    }
    Ok(Checkpoint { manifest, tensors })
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies the weights into `model`, which must have the same layout.
    pub fn load_into(&self, model: &mut Model<T>) -> Result<(), CheckpointError> {
        let names = model.params().names();
        if names.len() != self.manifest.params.len() {
            return Err(CheckpointError::Layout(format!(
                "checkpoint has {} parameters, model has {}",
                self.manifest.params.len(),
                names.len()
            )));
        }
        for (entry, (name, t)) in self.manifest.params.iter().zip(model.params().iter()) {
            if entry.name != name {
                return Err(CheckpointError::Layout(format!(
                    "checkpoint parameter '{}' where model has '{name}'",
                    entry.name
                )));
            }
            if entry.shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: entry.name.clone(),
                    expected: t.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }
        let names: Vec<String> = self
            .manifest
            .params
            .iter()
            .map(|p| p.name.clone())
            .collect();
        model.load_params(&names, self.tensors.clone())?;
        Ok(())
    }

    /// Rebuilds the model described by the manifest.
    pub fn into_model(self) -> Result<(Model<T>, Vocabulary), CheckpointError> {
        let mut model = Model::new(self.manifest.config.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok((model, self.manifest.vocabulary))
    }
}
