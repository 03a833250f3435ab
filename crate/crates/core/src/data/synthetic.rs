//! Planted-signal corpus generator.
//!
//! Each instance carries a latent intensity `s ~ U[-3, 3]` that becomes its
//! label. The text carries `round(w_text·s)` as one sentiment word, visual
//! channel 0 carries `w_visual·s` at every word, acoustic channel 0 carries
//! `w_acoustic·s`. Every feature channel also gets Gaussian noise `σ`.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, MultimodalInstance, LABEL_MAX, LABEL_MIN};

pub const FILLER_WORDS: [&str; 16] = [
    "the", "a", "and", "so", "it", "was", "i", "um", "really", "just", "this", "movie", "like",
    "that", "you", "know",
];

/// Sentiment words by text level; index 0 is level −3, index 5 is level +3.
pub const SENTIMENT_LEXICON: [(i32, [&str; 2]); 6] = [
    (-3, ["terrible", "awful"]),
    (-2, ["bad", "poor"]),
    (-1, ["dull", "meh"]),
    (1, ["fine", "okay"]),
    (2, ["good", "nice"]),
    (3, ["great", "superb"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub w_text: f64,
    pub w_visual: f64,
    pub w_acoustic: f64,
    pub noise: f64,
    /// Attach a six-score emotion vector derived from the latent intensity.
    pub emotions: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 12,
            d_visual: 4,
            d_acoustic: 3,
            w_text: 1.0 / 3.0,
            w_visual: 1.0 / 3.0,
            w_acoustic: 1.0 / 3.0,
            noise: 0.1,
            emotions: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let w = [self.w_text, self.w_visual, self.w_acoustic];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(DataError::InvalidGen(format!(
                "modality weights must be >= 0, got {w:?}"
            )));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidGen(format!(
                "modality weights must sum to 1, got {w:?}"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidGen(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(DataError::InvalidGen(format!(
                "length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if self.d_visual == 0 || self.d_acoustic == 0 {
            return Err(DataError::InvalidGen(
                "feature widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sentiment level the text channel shows for intensity `s`.
    pub fn text_level(&self, s: f64) -> i32 {
        ((self.w_text * s).round() as i32).clamp(-3, 3)
    }
}

fn sentiment_word<R: Rng + ?Sized>(level: i32, rng: &mut R) -> Option<&'static str> {
    SENTIMENT_LEXICON
        .iter()
        .find(|(l, _)| *l == level)
        .map(|(_, words)| words[rng.random_range(0..words.len())])
}

fn emotion_vector(s: f64) -> [f64; 6] {
    let (pos, neg) = (s.max(0.0), (-s).max(0.0));
    [pos, neg, neg / 2.0, neg / 3.0, neg / 4.0, s.abs() / 3.0]
}

/// One instance of `len` words at latent intensity `s`.
pub fn generate_instance<R: Rng + ?Sized>(
    id: String,
    s: f64,
    len: usize,
    cfg: &GenConfig,
    rng: &mut R,
) -> MultimodalInstance {
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut words: Vec<String> = (0..len)
        .map(|_| FILLER_WORDS[rng.random_range(0..FILLER_WORDS.len())].to_string())
        .collect();
    if let Some(w) = sentiment_word(cfg.text_level(s), rng) {
        let at = rng.random_range(0..len);
        words[at] = w.to_string();
    }
    let mut stream = |width: usize, signal: f64| -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| {
                (0..width)
                    .map(|c| {
                        let base = if c == 0 { signal } else { 0.0 };
                        base + noise.sample(rng)
                    })
                    .collect()
            })
            .collect()
    };
    let visual = stream(cfg.d_visual, cfg.w_visual * s);
    let acoustic = stream(cfg.d_acoustic, cfg.w_acoustic * s);
    MultimodalInstance {
        id,
        words,
        visual,
        acoustic,
        label: s,
        emotions: cfg.emotions.then(|| emotion_vector(s)),
        start_time: None,
        end_time: None,
    }
}

/// `n` instances; a pure function of `(n, seed, cfg)`.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &GenConfig) -> Result<Corpus, DataError> {
    cfg.validate()?;
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let instances = (0..n)
        .map(|i| {
            let s = rng.random_range(LABEL_MIN..=LABEL_MAX);
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            generate_instance(format!("syn-{i:05}"), s, len, cfg, &mut rng)
        })
        .collect();
    Corpus::new(instances)
}

/// Steps `[start, start + len)` of a stream held at intensity `intensity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub start: usize,
    pub len: usize,
    pub intensity: f64,
}

impl PlantedSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// A long stream built from consecutive `chunk_len`-word chunks. A chunk
/// whose midpoint falls in a planted span takes that span's intensity;
/// every other chunk is neutral (intensity 0). Steps last `step_seconds`.
///
/// Returns the stream and the per-step planted intensity.
pub fn synthetic_stream(
    total_len: usize,
    chunk_len: usize,
    spans: &[PlantedSpan],
    cfg: &GenConfig,
    seed: u64,
    step_seconds: f64,
) -> Result<(MultimodalInstance, Vec<f64>), DataError> {
    cfg.validate()?;
    if total_len == 0 || chunk_len == 0 {
        return Err(DataError::InvalidGen(
            "stream and chunk length must be positive".into(),
        ));
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let intensity_at = |step: usize| {
        spans
            .iter()
            .find(|s| (s.start..s.end()).contains(&step))
            .map_or(0.0, |s| s.intensity)
    };
    let mut stream = MultimodalInstance {
        id: format!("stream-{seed}"),
        words: Vec::with_capacity(total_len),
        visual: Vec::with_capacity(total_len),
        acoustic: Vec::with_capacity(total_len),
        label: 0.0,
        emotions: None,
        start_time: Some(0.0),
        end_time: Some(total_len as f64 * step_seconds),
    };
    let mut planted = Vec::with_capacity(total_len);
    let mut start = 0;
    while start < total_len {
        let len = chunk_len.min(total_len - start);
        let s = intensity_at(start + len / 2);
        let chunk = generate_instance(String::new(), s, len, cfg, &mut rng);
        stream.words.extend(chunk.words);
        stream.visual.extend(chunk.visual);
        stream.acoustic.extend(chunk.acoustic);
        planted.extend(std::iter::repeat_n(s, len));
        start += len;
    }
    Ok((stream, planted))
}
