//! Word-aligned multimodal instances, JSONL ingestion and splitting.

mod synthetic;

pub use synthetic::{
    generate_instance, generate_synthetic, synthetic_stream, GenConfig, PlantedSpan, FILLER_WORDS,
    SENTIMENT_LEXICON,
};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{PaddingMask, N_EMOTIONS};
use crate::model::ModelInput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;
pub const EMOTION_MAX: f64 = 3.0;
pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const UNKNOWN_ID: usize = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {msg}")]
    Json { line: usize, msg: String },
    #[error("line {line}: {words} words but {visual} visual and {acoustic} acoustic vectors")]
    LengthMismatch {
        line: usize,
        words: usize,
        visual: usize,
        acoustic: usize,
    },
    #[error("line {line}: label {value} outside [-3, +3]")]
    LabelRange { line: usize, value: f64 },
    #[error("line {line}: emotion score {value} outside [0, 3]")]
    EmotionRange { line: usize, value: f64 },
    #[error("line {line}: {stream} vectors have width {found}, expected {expected}")]
    DimMismatch {
        line: usize,
        stream: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("corpus is empty")]
    Empty,
    #[error("splitting needs at least 3 instances, corpus has {0}")]
    TooSmall(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid generator config: {0}")]
    InvalidGen(String),
}

/// One utterance: words with one visual and one acoustic vector per word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalInstance {
    pub id: String,
    pub words: Vec<String>,
    pub visual: Vec<Vec<f64>>,
    pub acoustic: Vec<Vec<f64>>,
    /// Sentiment intensity in [-3, +3].
    pub label: f64,
    /// happiness, sadness, anger, fear, disgust, surprise; each in [0, 3].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotions: Option<[f64; N_EMOTIONS]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<f64>,
}

impl MultimodalInstance {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Checks the per-instance invariants; `line` is only used in errors.
    pub fn validate(&self, line: usize) -> Result<(), DataError> {
        let (l, lv, la) = (self.words.len(), self.visual.len(), self.acoustic.len());
        if l == 0 {
            return Err(DataError::Invalid {
                line,
                msg: "instance has no words".into(),
            });
        }
        if l != lv || l != la {
            return Err(DataError::LengthMismatch {
                line,
                words: l,
                visual: lv,
                acoustic: la,
            });
        }
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(DataError::LabelRange {
                line,
                value: self.label,
            });
        }
        if let Some(e) = &self.emotions {
            if let Some(&bad) = e.iter().find(|v| !(0.0..=EMOTION_MAX).contains(*v)) {
                return Err(DataError::EmotionRange { line, value: bad });
            }
        }
        for (stream, rows) in [("visual", &self.visual), ("acoustic", &self.acoustic)] {
            let width = rows[0].len();
            if width == 0 {
                return Err(DataError::Invalid {
                    line,
                    msg: format!("{stream} vectors are empty"),
                });
            }
            if let Some(r) = rows.iter().find(|r| r.len() != width) {
                return Err(DataError::DimMismatch {
                    line,
                    stream,
                    expected: width,
                    found: r.len(),
                });
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid {
                    line,
                    msg: format!("{stream} stream has a non-finite value"),
                });
            }
        }
        match (self.start_time, self.end_time) {
            (Some(s), _) if !(s >= 0.0 && s.is_finite()) => Err(DataError::Invalid {
                line,
                msg: format!("start_time {s} must be a nonnegative number"),
            }),
            (_, Some(e)) if !(e >= 0.0 && e.is_finite()) => Err(DataError::Invalid {
                line,
                msg: format!("end_time {e} must be a nonnegative number"),
            }),
            (Some(s), Some(e)) if e < s => Err(DataError::Invalid {
                line,
                msg: format!("end_time {e} precedes start_time {s}"),
            }),
            _ => Ok(()),
        }
    }

    pub fn d_visual(&self) -> usize {
        self.visual.first().map_or(0, Vec::len)
    }

    pub fn d_acoustic(&self) -> usize {
        self.acoustic.first().map_or(0, Vec::len)
    }

    /// Word range `[start, end)` as a new instance carrying the same label.
    pub fn slice(&self, start: usize, end: usize) -> MultimodalInstance {
        let per_step = match (self.start_time, self.end_time) {
            (Some(s), Some(e)) => Some((s, (e - s) / self.len() as f64)),
            _ => None,
        };
        MultimodalInstance {
            id: format!("{}[{start}..{end}]", self.id),
            words: self.words[start..end].to_vec(),
            visual: self.visual[start..end].to_vec(),
            acoustic: self.acoustic[start..end].to_vec(),
            label: self.label,
            emotions: self.emotions,
            start_time: per_step.map(|(s, dt)| s + dt * start as f64),
            end_time: per_step.map(|(s, dt)| s + dt * end as f64),
        }
    }
}

/// Token → id map with a reserved unknown id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids follow first appearance.
    pub fn build<'a>(instances: impl IntoIterator<Item = &'a MultimodalInstance>) -> Self {
        let mut v = Self::from(vec![UNKNOWN_TOKEN.to_string()]);
        for inst in instances {
            for w in &inst.words {
                if !v.index.contains_key(w) {
                    v.index.insert(w.clone(), v.tokens.len());
                    v.tokens.push(w.clone());
                }
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(mut tokens: Vec<String>) -> Self {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            tokens.insert(0, UNKNOWN_TOKEN.to_string());
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub instances: Vec<MultimodalInstance>,
    pub vocab: Vocabulary,
    pub d_visual: usize,
    pub d_acoustic: usize,
}

impl Corpus {
    /// Validates every instance and checks feature widths agree. The
    /// vocabulary is built from these instances.
    pub fn new(instances: Vec<MultimodalInstance>) -> Result<Self, DataError> {
        let first = instances.first().ok_or(DataError::Empty)?;
        let (dv, da) = (first.d_visual(), first.d_acoustic());
        for (i, inst) in instances.iter().enumerate() {
            let line = i + 1;
            inst.validate(line)?;
            if inst.d_visual() != dv {
                return Err(DataError::DimMismatch {
                    line,
                    stream: "visual",
                    expected: dv,
                    found: inst.d_visual(),
                });
            }
            if inst.d_acoustic() != da {
                return Err(DataError::DimMismatch {
                    line,
                    stream: "acoustic",
                    expected: da,
                    found: inst.d_acoustic(),
                });
            }
        }
        let vocab = Vocabulary::build(&instances);
        Ok(Self {
            instances,
            vocab,
            d_visual: dv,
            d_acoustic: da,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn with_vocab(mut self, vocab: Vocabulary) -> Self {
        self.vocab = vocab;
        self
    }

    /// Same corpus with every visual and acoustic value set to zero.
    pub fn zero_nonlexical(&self) -> Self {
        let mut out = self.clone();
        for inst in &mut out.instances {
            inst.visual.iter_mut().flatten().for_each(|v| *v = 0.0);
            inst.acoustic.iter_mut().flatten().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for inst in &self.instances {
            s.push_str(&serde_json::to_string(inst).expect("instances serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| io_err(path, e))
    }

    pub fn encode<T: Scalar>(&self, inst: &MultimodalInstance) -> ModelInput<T> {
        encode(inst, &self.vocab)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Maps words to ids (unseen words to [`UNKNOWN_ID`]) and features to tensors.
pub fn encode<T: Scalar>(inst: &MultimodalInstance, vocab: &Vocabulary) -> ModelInput<T> {
    let to_tensor = |rows: &[Vec<f64>]| {
        let (l, d) = (rows.len(), rows[0].len());
        Tensor::from_parts(
            vec![l, d],
            rows.iter()
                .flatten()
                .map(|&x| T::from_f64_lossy(x))
                .collect(),
        )
    };
    ModelInput {
        ids: inst.words.iter().map(|w| vocab.id(w)).collect(),
        mask: PaddingMask::all_real(inst.len()),
        visual: to_tensor(&inst.visual),
        acoustic: to_tensor(&inst.acoustic),
    }
}

/// Parses one JSON object per line; blank lines are skipped.
pub fn parse_jsonl_str(text: &str) -> Result<Corpus, DataError> {
    let mut instances = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let inst: MultimodalInstance = serde_json::from_str(raw).map_err(|e| DataError::Json {
            line,
            msg: e.to_string(),
        })?;
        inst.validate(line)?;
        instances.push(inst);
        lines.push(line);
    }
    // re-run corpus checks, reporting the source line rather than the index
    Corpus::new(instances).map_err(|e| renumber(e, &lines))
}

fn renumber(e: DataError, lines: &[usize]) -> DataError {
    let fix = |l: usize| lines.get(l.wrapping_sub(1)).copied().unwrap_or(l);
    match e {
        DataError::DimMismatch {
            line,
            stream,
            expected,
            found,
        } => DataError::DimMismatch {
            line: fix(line),
            stream,
            expected,
            found,
        },
        other => other,
    }
}

pub fn parse_jsonl(path: &Path) -> Result<Corpus, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_jsonl_str(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(DataError::InvalidSplit(format!(
                "fractions must be positive, got {f:?}"
            )));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!(
                "fractions must sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }

    /// Train/val/test sizes for `n` items; every part gets at least one.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let mut s = [
            (self.train * n as f64).round() as usize,
            (self.val * n as f64).round() as usize,
            0,
        ];
        s[0] = s[0].clamp(1, n - 2);
        s[1] = s[1].clamp(1, n - 1 - s[0]);
        s[2] = n - s[0] - s[1];
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Deterministic shuffle-then-cut. All three parts share the vocabulary of
/// the training part.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Splits, DataError> {
    spec.validate()?;
    let n = corpus.len();
    if n < 3 {
        return Err(DataError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let [nt, nv, _] = spec.sizes(n);
    let part = |idx: &[usize]| {
        idx.iter()
            .map(|&i| corpus.instances[i].clone())
            .collect::<Vec<_>>()
    };
    let train = part(&order[..nt]);
    let val = part(&order[nt..nt + nv]);
    let test = part(&order[nt + nv..]);
    let vocab = Vocabulary::build(&train);
    let make = |instances| Corpus {
        instances,
        vocab: vocab.clone(),
        d_visual: corpus.d_visual,
        d_acoustic: corpus.d_acoustic,
    };
    Ok(Splits {
        train: make(train),
        val: make(val),
        test: make(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(words: usize, visual: usize, label: f64) -> String {
        let inst = MultimodalInstance {
            id: "a".into(),
            words: (0..words).map(|i| format!("w{i}")).collect(),
            visual: vec![vec![0.5, 1.0]; visual],
            acoustic: vec![vec![0.25]; words],
            label,
            emotions: None,
            start_time: None,
            end_time: None,
        };
        serde_json::to_string(&inst).unwrap()
    }

    #[test]
    fn parses_single_line() {
        let c = parse_jsonl_str(&line(2, 2, 1.5)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c.d_visual, c.d_acoustic), (2, 1));
        assert_eq!(c.vocab.len(), 3);
    }

    #[test]
    fn reports_length_mismatch_with_line() {
        let text = format!("{}\n{}\n", line(2, 2, 0.0), line(3, 2, 0.0));
        let err = parse_jsonl_str(&text).unwrap_err();
        match &err {
            DataError::LengthMismatch {
                line,
                words,
                visual,
                ..
            } => assert_eq!((*line, *words, *visual), (2, 3, 2)),
            e => panic!("unexpected {e}"),
        }
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn reports_label_range() {
        let err = parse_jsonl_str(&line(1, 1, 3.5)).unwrap_err();
        assert!(matches!(err, DataError::LabelRange { line: 1, value } if value == 3.5));
        assert!(err.to_string().contains("[-3, +3]"));
    }

    #[test]
    fn reports_malformed_json_and_dims() {
        let err = parse_jsonl_str("{\"id\": 1\n").unwrap_err();
        assert!(matches!(err, DataError::Json { line: 1, .. }));
        let other = line(1, 1, 0.0).replace("[0.5,1.0]", "[0.5]");
        let text = format!("{}\n\n{}\n", line(1, 1, 0.0), other);
        let err = parse_jsonl_str(&text).unwrap_err();
        assert!(
            matches!(
                err,
                DataError::DimMismatch {
                    line: 3,
                    expected: 2,
                    found: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn rejects_bad_emotions() {
        let mut inst: MultimodalInstance = serde_json::from_str(&line(1, 1, 0.0)).unwrap();
        inst.emotions = Some([0.0, 1.0, 2.0, 3.0, 3.5, 0.0]);
        assert!(matches!(
            inst.validate(4),
            Err(DataError::EmotionRange { line: 4, .. })
        ));
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 1,
        };
        assert_eq!(spec.sizes(10), [6, 2, 2]);
        assert_eq!(spec.sizes(3), [1, 1, 1]);
        let bad = SplitSpec { train: 0.5, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_tokens_map_to_reserved_id() {
        let c = parse_jsonl_str(&line(2, 2, 1.0)).unwrap();
        assert_eq!(c.vocab.id("w0"), 1);
        assert_eq!(c.vocab.id("never-seen"), UNKNOWN_ID);
    }
}
