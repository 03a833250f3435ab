//! Layered run configuration.
//!
//! Precedence, lowest first: built-in defaults, the seed from
//! `MAGFUSE_SEED`, the JSON config file, explicit command-line flags, and
//! `--set key=value` overrides. Every subcommand persists the merged result
//! as `resolved_config.json`, which can be fed back through `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use magfuse::data::GenConfig;
use magfuse::highlight::HighlightConfig;
use magfuse::{ModelConfig, SplitSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const SEED_ENV: &str = "MAGFUSE_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Settings of `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

/// A planted span for stream generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanSpec {
    pub start: usize,
    pub len: usize,
    pub intensity: f64,
}

/// Switches `gen` from a corpus of utterances to one long stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub len: usize,
    pub chunk_len: usize,
    pub step_seconds: f64,
    pub spans: Vec<SpanSpec>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            len: 500,
            chunk_len: 8,
            step_seconds: 1.0,
            spans: Vec::new(),
        }
    }
}

/// Settings of `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRunConfig {
    pub n: usize,
    pub seed: u64,
    pub gen: GenConfig,
    pub stream: Option<StreamSpec>,
}

impl Default for GenRunConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            gen: GenConfig::default(),
            stream: None,
        }
    }
}

/// Settings of `eval`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Zero the visual and acoustic streams before predicting.
    pub text_only: bool,
}

/// Settings of `highlight`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighlightRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub stream: Option<PathBuf>,
    pub highlight: HighlightConfig,
}

/// Parses `key.path=value`. The value is read as JSON when it parses,
/// otherwise as a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), CliError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| {
        CliError::config(format!("override '{raw}' is not of the form key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!(
            "override '{raw}' has an empty key segment"
        )));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key inside a JSON object, creating objects on the way.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(CliError::config(format!(
                    "cannot set '{key}': '{}' is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields at least one part")
}

pub fn get_dotted<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(root, |node, part| node.get(part))
}

/// Reads a JSON config file; it must hold an object.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: invalid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::config(format!(
            "{}: top level must be an object",
            path.display()
        )));
    }
    Ok(value)
}

/// Everything that feeds one resolved configuration.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub file: Option<PathBuf>,
    /// Values of explicit flags, already keyed.
    pub flags: Vec<(String, Value)>,
    /// Raw `--set` arguments.
    pub overrides: Vec<String>,
    /// Content of `MAGFUSE_SEED`, if set.
    pub env_seed: Option<String>,
}

impl Layers {
    pub fn from_env(
        file: Option<PathBuf>,
        flags: Vec<(String, Value)>,
        overrides: Vec<String>,
    ) -> Self {
        Self {
            file,
            flags,
            overrides,
            env_seed: std::env::var(SEED_ENV).ok(),
        }
    }

    /// Merges the layers and deserializes. `seed_keys` receive the
    /// environment seed when no other layer sets them.
    pub fn resolve<C: DeserializeOwned>(&self, seed_keys: &[&str]) -> Result<C, CliError> {
        let mut root = match &self.file {
            Some(p) => read_config_file(p)?,
            None => Value::Object(Map::new()),
        };
        for (k, v) in &self.flags {
            set_dotted(&mut root, k, v.clone())?;
        }
        for raw in &self.overrides {
            let (k, v) = parse_override(raw)?;
            set_dotted(&mut root, &k, v)?;
        }
        if let Some(raw) = &self.env_seed {
            let seed: u64 = raw.trim().parse().map_err(|_| {
                CliError::config(format!(
                    "{SEED_ENV}='{raw}' is not an unsigned 64-bit integer"
                ))
            })?;
            for key in seed_keys {
                if get_dotted(&root, key).is_none() {
                    set_dotted(&mut root, key, Value::from(seed))?;
                }
            }
        }
        serde_json::from_value(root)
            .map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("configs serialize") + "\n";
    fs::write(path, text).map_err(|e| CliError::write(path, e))
}
