//! Highlight detection over long word-aligned streams.
//!
//! A trained model scores fixed-length windows slid along the stream;
//! windows scoring at or above a threshold are merged into segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{encode, MultimodalInstance, Vocabulary};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HighlightError {
    #[error("invalid highlight settings: {0}")]
    Invalid(String),
    #[error("stream of {len} steps is shorter than half a window ({window_len})")]
    StreamTooShort { len: usize, window_len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamWindow {
    pub start_step: usize,
    pub end_step: usize,
}

impl StreamWindow {
    pub fn len(&self) -> usize {
        self.end_step - self.start_step
    }

    pub fn is_empty(&self) -> bool {
        self.end_step == self.start_step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window: StreamWindow,
    /// Raw predicted intensity.
    pub intensity: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightSegment {
    pub start_step: usize,
    /// Exclusive.
    pub end_step: usize,
    pub start_time: Option<f64>,
    pub end_time: Option<f64>,
    pub peak_score: f64,
    pub mean_score: f64,
}

impl HighlightSegment {
    pub fn len(&self) -> usize {
        self.end_step - self.start_step
    }

    pub fn is_empty(&self) -> bool {
        self.end_step == self.start_step
    }
}

/// Offsets `0, stride, 2·stride, …` while a full window fits, then one
/// trailing partial window if it holds at least half a window of steps.
pub fn windows(
    stream_len: usize,
    window_len: usize,
    stride: usize,
) -> Result<Vec<StreamWindow>, HighlightError> {
    if window_len == 0 || stride == 0 {
        return Err(HighlightError::Invalid(
            "window and stride must be >= 1".into(),
        ));
    }
    if 2 * stream_len < window_len || stream_len == 0 {
        return Err(HighlightError::StreamTooShort {
            len: stream_len,
            window_len,
        });
    }
    let mut out = Vec::new();
    let mut off = 0;
    while off + window_len <= stream_len {
        out.push(StreamWindow {
            start_step: off,
            end_step: off + window_len,
        });
        off += stride;
    }
    if off < stream_len && 2 * (stream_len - off) >= window_len {
        out.push(StreamWindow {
            start_step: off,
            end_step: stream_len,
        });
    }
    Ok(out)
}

/// Scores every window of `stream` with the model in eval mode. The score
/// is `|intensity|`, or the signed intensity with `positive_only`.
pub fn score_stream<T: Scalar>(
    stream: &MultimodalInstance,
    model: &Model<T>,
    vocab: &Vocabulary,
    window_len: usize,
    stride: usize,
    positive_only: bool,
) -> Result<Vec<WindowScore>, HighlightError> {
    windows(stream.len(), window_len, stride)?
        .into_iter()
        .map(|w| {
            let view = stream.slice(w.start_step, w.end_step);
            let intensity = model
                .predict(&encode::<T>(&view, vocab))?
                .intensity
                .to_f64_lossy();
            let score = if positive_only {
                intensity
            } else {
                intensity.abs()
            };
            Ok(WindowScore {
                window: w,
                intensity,
                score,
            })
        })
        .collect()
}

/// Merges windows scoring `>= threshold`. Overlapping or touching windows
/// join; segments whose gap is below `min_gap` steps join; segments shorter
/// than `min_len` steps are dropped. Output is sorted and disjoint.
pub fn segment(
    scores: &[WindowScore],
    threshold: f64,
    min_gap: usize,
    min_len: usize,
) -> Vec<HighlightSegment> {
    let mut marked: Vec<&WindowScore> = scores.iter().filter(|s| s.score >= threshold).collect();
    marked.sort_by_key(|s| (s.window.start_step, s.window.end_step));
    let mut groups: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for w in marked {
        match groups.last_mut() {
            Some((_, end, members))
                if w.window.start_step <= *end || w.window.start_step - *end < min_gap =>
            {
                *end = (*end).max(w.window.end_step);
                members.push(w.score);
            }
            _ => groups.push((w.window.start_step, w.window.end_step, vec![w.score])),
        }
    }
    groups
        .into_iter()
        .filter(|(s, e, _)| e - s >= min_len)
        .map(|(start, end, members)| HighlightSegment {
            start_step: start,
            end_step: end,
            start_time: None,
            end_time: None,
            peak_score: members.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_score: members.iter().sum::<f64>() / members.len() as f64,
        })
        .collect()
}

/// Linear-interpolation quantile of `values` (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> Result<f64, HighlightError> {
    if values.is_empty() {
        return Err(HighlightError::Invalid("no scores".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(HighlightError::Invalid(format!(
            "quantile {q} outside [0, 1]"
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// How the highlight threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Fixed score.
    Absolute(f64),
    /// The given quantile of the stream's own window scores, never below
    /// `floor`.
    Quantile { q: f64, floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighlightConfig {
    pub window: usize,
    pub stride: usize,
    pub threshold: Threshold,
    pub min_gap: usize,
    pub min_len: usize,
    pub positive_only: bool,
}

/// Default quantile floor: half of the largest label magnitude.
pub const DEFAULT_SCORE_FLOOR: f64 = 1.5;

impl Default for HighlightConfig {
    fn default() -> Self {
        Self {
            window: 16,
            stride: 4,
            threshold: Threshold::Absolute(DEFAULT_SCORE_FLOOR),
            min_gap: 0,
            min_len: 0,
            positive_only: false,
        }
    }
}

impl Threshold {
    pub fn resolve(&self, scores: &[WindowScore]) -> Result<f64, HighlightError> {
        match *self {
            Threshold::Absolute(t) => Ok(t),
            Threshold::Quantile { q, floor } => {
                let s: Vec<f64> = scores.iter().map(|w| w.score).collect();
                Ok(quantile(&s, q)?.max(floor))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightResult {
    pub threshold: f64,
    pub windows: Vec<WindowScore>,
    pub segments: Vec<HighlightSegment>,
}

/// Scores, thresholds and segments a stream, attaching times in seconds
/// when the stream has `start_time` and `end_time` (steps are assumed
/// evenly spaced between them).
pub fn detect_highlights<T: Scalar>(
    stream: &MultimodalInstance,
    model: &Model<T>,
    vocab: &Vocabulary,
    cfg: &HighlightConfig,
) -> Result<HighlightResult, HighlightError> {
    let scores = score_stream(
        stream,
        model,
        vocab,
        cfg.window,
        cfg.stride,
        cfg.positive_only,
    )?;
    let threshold = cfg.threshold.resolve(&scores)?;
    let mut segments = segment(&scores, threshold, cfg.min_gap, cfg.min_len);
    if let (Some(t0), Some(t1)) = (stream.start_time, stream.end_time) {
        let dt = (t1 - t0) / stream.len() as f64;
        for s in &mut segments {
            s.start_time = Some(t0 + dt * s.start_step as f64);
            s.end_time = Some(t0 + dt * s.end_step as f64);
        }
    }
    Ok(HighlightResult {
        threshold,
        windows: scores,
        segments,
    })
}

pub fn segments_to_csv(segments: &[HighlightSegment]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("start_step,end_step,start_time,end_time,peak_score,mean_score\n");
    for seg in segments {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            seg.start_step,
            seg.end_step,
            opt(seg.start_time),
            opt(seg.end_time),
            seg.peak_score,
            seg.mean_score
        ));
    }
    s
}
