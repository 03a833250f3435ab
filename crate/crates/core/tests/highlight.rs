use magfuse::data::{generate_synthetic, synthetic_stream, GenConfig, PlantedSpan};
use magfuse::highlight::{
    detect_highlights, score_stream, segment, HighlightConfig, StreamWindow, Threshold, WindowScore,
};
use magfuse::metrics::pearson;
use magfuse::train::train;
use magfuse::{Corpus, Model64, ModelConfig, MultimodalInstance, Splits, TrainConfig};
use proptest::prelude::*;
use std::sync::OnceLock;

fn gen(noise: f64) -> GenConfig {
    GenConfig {
        min_len: 4,
        max_len: 16,
        noise,
        ..GenConfig::default()
    }
}

/// One small model trained on synthetic data, shared by the tests below.
fn trained() -> &'static (Model64, Corpus) {
    static MODEL: OnceLock<(Model64, Corpus)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let c = generate_synthetic(300, 21, &gen(0.1)).unwrap();
        let splits = Splits {
            train: c.clone(),
            val: c.clone(),
            test: c.clone(),
        };
        let cfg = ModelConfig::default().with_data_dims(c.vocab.len(), c.d_visual, c.d_acoustic);
        let mut m = Model64::new(cfg, 21).unwrap();
        let tc = TrainConfig {
            epochs: 15,
            learning_rate: 1e-3,
            dropout_p: 0.1,
            seed: 21,
            ..TrainConfig::default()
        };
        train(&mut m, &splits, &tc).unwrap();
        (m, c)
    })
}

fn concat(parts: &[MultimodalInstance]) -> MultimodalInstance {
    let mut out = parts[0].clone();
    out.id = "stream".into();
    for p in &parts[1..] {
        out.words.extend(p.words.iter().cloned());
        out.visual.extend(p.visual.iter().cloned());
        out.acoustic.extend(p.acoustic.iter().cloned());
    }
    out.label = 0.0;
    out
}

#[test]
fn window_scores_follow_planted_labels() {
    let (model, corpus) = trained();
    let pieces = generate_synthetic(
        60,
        22,
        &GenConfig {
            min_len: 8,
            max_len: 8,
            noise: 0.0,
            ..GenConfig::default()
        },
    )
    .unwrap();
    let stream = concat(&pieces.instances);
    let scores = score_stream(&stream, model, &corpus.vocab, 8, 8, true).unwrap();
    assert_eq!(scores.len(), 60);
    let got: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let r = pearson(&got, &pieces.labels()).unwrap();
    assert!(r > 0.8, "r = {r}");

    let again = score_stream(&stream, model, &corpus.vocab, 8, 8, true).unwrap();
    assert_eq!(again, scores);
    let absolute = score_stream(&stream, model, &corpus.vocab, 8, 8, false).unwrap();
    for (a, s) in absolute.iter().zip(&scores) {
        assert_eq!(a.score, s.intensity.abs());
    }
}

fn iou(span: (usize, usize), segs: &[(usize, usize)]) -> f64 {
    let touching: Vec<_> = segs
        .iter()
        .filter(|s| s.0 < span.1 && span.0 < s.1)
        .collect();
    let inter: usize = touching
        .iter()
        .map(|s| s.1.min(span.1) - s.0.max(span.0))
        .sum();
    let covered: usize = touching.iter().map(|s| s.1 - s.0).sum();
    inter as f64 / (covered + (span.1 - span.0) - inter) as f64
}

#[test]
fn planted_spans_are_recovered_with_times() {
    let (model, corpus) = trained();
    let spans = [
        PlantedSpan {
            start: 120,
            len: 32,
            intensity: 3.0,
        },
        PlantedSpan {
            start: 320,
            len: 32,
            intensity: -3.0,
        },
    ];
    let cfg = HighlightConfig {
        window: 16,
        stride: 4,
        threshold: Threshold::Quantile { q: 0.9, floor: 1.5 },
        ..HighlightConfig::default()
    };
    let (stream, _) = synthetic_stream(500, 8, &spans, &gen(0.1), 23, 0.25).unwrap();
    let result = detect_highlights(&stream, model, &corpus.vocab, &cfg).unwrap();
    let segs: Vec<_> = result
        .segments
        .iter()
        .map(|s| (s.start_step, s.end_step))
        .collect();
    for s in &spans {
        let v = iou((s.start, s.end()), &segs);
        assert!(v >= 0.5, "span {s:?}: IoU {v} with {segs:?}");
    }
    for s in &result.segments {
        assert_eq!(s.start_time, Some(s.start_step as f64 * 0.25));
        assert_eq!(s.end_time, Some(s.end_step as f64 * 0.25));
    }

    let positive = HighlightConfig {
        positive_only: true,
        ..cfg.clone()
    };
    let result = detect_highlights(&stream, model, &corpus.vocab, &positive).unwrap();
    assert!(result.segments.iter().all(|s| s.end_step <= 250));
    assert!(!result.segments.is_empty());

    let (noise, _) = synthetic_stream(500, 8, &[], &gen(0.1), 24, 0.25).unwrap();
    let result = detect_highlights(&noise, model, &corpus.vocab, &cfg).unwrap();
    assert!(result.segments.is_empty(), "{:?}", result.segments);
}

#[test]
fn short_streams_are_rejected() {
    let (model, corpus) = trained();
    let tiny = generate_synthetic(
        1,
        25,
        &GenConfig {
            min_len: 4,
            max_len: 4,
            ..GenConfig::default()
        },
    )
    .unwrap();
    assert!(score_stream(&tiny.instances[0], model, &corpus.vocab, 10, 2, false).is_err());
    assert_eq!(
        score_stream(&tiny.instances[0], model, &corpus.vocab, 8, 2, false)
            .unwrap()
            .len(),
        1
    );
}

fn scores_from(values: &[f64], window: usize, stride: usize) -> Vec<WindowScore> {
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| WindowScore {
            window: StreamWindow {
                start_step: k * stride,
                end_step: k * stride + window,
            },
            intensity: v,
            score: v,
        })
        .collect()
}

fn covered(segs: &[magfuse::HighlightSegment]) -> usize {
    segs.iter().map(|s| s.end_step - s.start_step).sum()
}

proptest! {
    #[test]
    fn segments_are_sorted_disjoint_and_consistent(
        values in prop::collection::vec(0.0f64..3.0, 1..60),
        window in 1usize..10,
        stride in 1usize..6,
        threshold in 0.0f64..3.0,
        min_gap in 0usize..8,
        min_len in 0usize..12,
    ) {
        let segs = segment(&scores_from(&values, window, stride), threshold, min_gap, min_len);
        for s in &segs {
            prop_assert!(s.end_step > s.start_step);
            prop_assert!(s.end_step - s.start_step >= min_len);
            prop_assert!(s.peak_score >= s.mean_score);
            prop_assert!(s.mean_score >= threshold);
        }
        for w in segs.windows(2) {
            prop_assert!(w[0].end_step < w[1].start_step);
            prop_assert!(w[1].start_step - w[0].end_step >= min_gap);
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_steps(
        values in prop::collection::vec(0.0f64..3.0, 1..60),
        window in 1usize..10,
        stride in 1usize..6,
        t1 in 0.0f64..3.0,
        dt in 0.0f64..3.0,
        min_gap in 0usize..8,
        min_len in 0usize..12,
    ) {
        let s = scores_from(&values, window, stride);
        let low = segment(&s, t1, min_gap, min_len);
        let high = segment(&s, t1 + dt, min_gap, min_len);
        prop_assert!(covered(&high) <= covered(&low));
    }
}
