use std::fs;
use std::path::{Path, PathBuf};

use magfuse::data::{generate_synthetic, parse_jsonl, split, synthetic_stream, PlantedSpan};
use magfuse::highlight::{detect_highlights, segments_to_csv, Threshold, DEFAULT_SCORE_FLOOR};
use magfuse::train::{evaluate, load_checkpoint, save_checkpoint, train as train_model};
use magfuse::{Corpus, Model64, ModelConfig};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{
    write_json, EvalConfig, GenRunConfig, HighlightRunConfig, Layers, RunConfig,
    RESOLVED_CONFIG_FILE,
};
use crate::error::CliError;
use crate::{CommonArgs, EvalArgs, GenArgs, HighlightArgs, TrainArgs};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STREAM_FILE: &str = "stream.jsonl";
pub const GEN_MANIFEST_FILE: &str = "gen_manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUNLOG_JSONL: &str = "runlog.jsonl";
pub const RUNLOG_CSV: &str = "runlog.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SEGMENTS_JSON: &str = "segments.json";
pub const SEGMENTS_CSV: &str = "segments.csv";
pub const WINDOWS_FILE: &str = "windows.json";

pub const DEFAULT_EVAL_OUT: &str = "magfuse-eval";
pub const DEFAULT_HIGHLIGHT_OUT: &str = "magfuse-highlight";

fn push<V: Serialize>(flags: &mut Vec<(String, Value)>, key: &str, v: Option<V>) {
    if let Some(v) = v {
        flags.push((
            key.to_string(),
            serde_json::to_value(v).expect("flag values serialize"),
        ));
    }
}

fn layers(common: &CommonArgs, flags: Vec<(String, Value)>) -> Layers {
    Layers::from_env(common.config.clone(), flags, common.set.clone())
}

fn out_dir(common: &CommonArgs, default: &str) -> Result<PathBuf, CliError> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| CliError::write(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::write(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("sha256:{:x}", Sha256::digest(bytes))
}

fn parse_span(raw: &str) -> Result<Value, CliError> {
    let bad = || CliError::config(format!("span '{raw}' is not START:LEN:INTENSITY"));
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: usize = parts[0].trim().parse().map_err(|_| bad())?;
    let len: usize = parts[1].trim().parse().map_err(|_| bad())?;
    let intensity: f64 = parts[2].trim().parse().map_err(|_| bad())?;
    Ok(json!({"start": start, "len": len, "intensity": intensity}))
}

pub fn gen(args: &GenArgs) -> Result<Value, CliError> {
    let mut flags = Vec::new();
    push(&mut flags, "n", args.n);
    push(&mut flags, "seed", args.seed);
    push(&mut flags, "gen.w_text", args.w_text);
    push(&mut flags, "gen.w_visual", args.w_visual);
    push(&mut flags, "gen.w_acoustic", args.w_acoustic);
    push(&mut flags, "gen.noise", args.noise);
    push(&mut flags, "gen.min_len", args.min_len);
    push(&mut flags, "gen.max_len", args.max_len);
    push(&mut flags, "gen.d_visual", args.d_visual);
    push(&mut flags, "gen.d_acoustic", args.d_acoustic);
    push(&mut flags, "gen.emotions", args.emotions.then_some(true));
    push(&mut flags, "stream.len", args.stream_len);
    push(&mut flags, "stream.chunk_len", args.chunk_len);
    push(&mut flags, "stream.step_seconds", args.step_seconds);
    if !args.spans.is_empty() {
        let spans = args
            .spans
            .iter()
            .map(|s| parse_span(s))
            .collect::<Result<Vec<_>, _>>()?;
        flags.push(("stream.spans".into(), Value::Array(spans)));
    }
    let cfg: GenRunConfig = layers(&args.common, flags).resolve(&["seed"])?;
    cfg.gen.validate()?;
    let out = args
        .common
        .out
        .clone()
        .ok_or_else(|| CliError::config("gen needs an output directory (-o)"))?;

    let (file, corpus) = match &cfg.stream {
        None => (CORPUS_FILE, generate_synthetic(cfg.n, cfg.seed, &cfg.gen)?),
        Some(s) => {
            let spans: Vec<PlantedSpan> = s
                .spans
                .iter()
                .map(|p| PlantedSpan {
                    start: p.start,
                    len: p.len,
                    intensity: p.intensity,
                })
                .collect();
            let (stream, _) = synthetic_stream(
                s.len,
                s.chunk_len,
                &spans,
                &cfg.gen,
                cfg.seed,
                s.step_seconds,
            )?;
            (STREAM_FILE, Corpus::new(vec![stream])?)
        }
    };
    fs::create_dir_all(&out).map_err(|e| CliError::write(&out, e))?;
    let text = corpus.to_jsonl();
    write_text(&out.join(file), &text)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    let manifest = json!({
        "file": file,
        "lines": corpus.len(),
        "seed": cfg.seed,
        "config": cfg,
        "checksum": sha256_hex(text.as_bytes()),
    });
    write_json(&out.join(GEN_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn check_corpus(model: &ModelConfig, corpus: &Corpus, what: &str) -> Result<(), CliError> {
    if (model.mag.d_visual, model.mag.d_acoustic) != (corpus.d_visual, corpus.d_acoustic) {
        return Err(CliError::dims(format!(
            "{what}: model expects visual/acoustic widths {}/{}, data has {}/{}",
            model.mag.d_visual, model.mag.d_acoustic, corpus.d_visual, corpus.d_acoustic
        )));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<Value, CliError> {
    let mut flags = Vec::new();
    push(&mut flags, "train.epochs", args.epochs);
    push(&mut flags, "train.seed", args.seed);
    let cfg: RunConfig = layers(&args.common, flags).resolve(&["train.seed", "split.seed"])?;
    cfg.train.validate()?;
    let out = args
        .common
        .out
        .clone()
        .ok_or_else(|| CliError::config("train needs an output directory (-o)"))?;

    let corpus = parse_jsonl(&args.data)?;
    let splits = split(&corpus, &cfg.split)?;
    let model_cfg = cfg.model.clone().with_data_dims(
        splits.train.vocab.len(),
        corpus.d_visual,
        corpus.d_acoustic,
    );
    model_cfg.validate()?;
    let resolved = RunConfig {
        model: model_cfg.clone(),
        ..cfg
    };

    fs::create_dir_all(&out).map_err(|e| CliError::write(&out, e))?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let mut model = Model64::new(model_cfg, resolved.train.seed)?;
    let outcome = train_model(&mut model, &splits, &resolved.train)?;
    save_checkpoint(&model, &splits.train.vocab, &out.join(CHECKPOINT_DIR))?;
    write_text(&out.join(RUNLOG_JSONL), &outcome.log.to_jsonl())?;
    write_text(&out.join(RUNLOG_CSV), &outcome.log.to_csv())?;
    let test = evaluate(&model, &splits.test)?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "optimizer_steps": outcome.optimizer_steps,
        "split_sizes": {"train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len()},
        "test": test,
    });
    write_json(&out.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| {
        CliError::config(format!("missing --{what} (or '{what}' in the config file)"))
    })
}

fn load_model(dir: &Path) -> Result<(Model64, magfuse::Vocabulary), CliError> {
    Ok(load_checkpoint::<f64>(dir)?.into_model()?)
}

pub fn eval(args: &EvalArgs) -> Result<Value, CliError> {
    let mut flags = Vec::new();
    push(&mut flags, "checkpoint", args.checkpoint.as_ref());
    push(&mut flags, "data", args.data.as_ref());
    push(&mut flags, "text_only", args.text_only.then_some(true));
    let cfg: EvalConfig = layers(&args.common, flags).resolve(&[])?;
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.data, "data")?;

    let (model, vocab) = load_model(&ck)?;
    let mut corpus = parse_jsonl(&data)?.with_vocab(vocab);
    check_corpus(model.config(), &corpus, "data")?;
    if cfg.text_only {
        corpus = corpus.zero_nonlexical();
    }
    let report = evaluate(&model, &corpus)?;
    let out = out_dir(&args.common, DEFAULT_EVAL_OUT)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok(serde_json::to_value(report).expect("reports serialize"))
}

pub fn highlight(args: &HighlightArgs) -> Result<Value, CliError> {
    let mut flags = Vec::new();
    push(&mut flags, "checkpoint", args.checkpoint.as_ref());
    push(&mut flags, "stream", args.stream.as_ref());
    push(&mut flags, "highlight.window", args.window);
    push(&mut flags, "highlight.stride", args.stride);
    push(&mut flags, "highlight.min_gap", args.min_gap);
    push(&mut flags, "highlight.min_len", args.min_len);
    push(
        &mut flags,
        "highlight.positive_only",
        args.positive_only.then_some(true),
    );
    push(
        &mut flags,
        "highlight.threshold",
        args.threshold.map(Threshold::Absolute),
    );
    push(
        &mut flags,
        "highlight.threshold",
        args.quantile.map(|q| Threshold::Quantile {
            q,
            floor: args.min_score.unwrap_or(DEFAULT_SCORE_FLOOR),
        }),
    );
    let cfg: HighlightRunConfig = layers(&args.common, flags).resolve(&[])?;
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let stream_path = required(&cfg.stream, "stream")?;

    let (model, vocab) = load_model(&ck)?;
    let corpus = parse_jsonl(&stream_path)?;
    if corpus.len() != 1 {
        return Err(CliError::schema(format!(
            "{}: a stream file holds exactly one instance, found {}",
            stream_path.display(),
            corpus.len()
        )));
    }
    check_corpus(model.config(), &corpus, "stream")?;
    let max = model.config().encoder.max_seq_len;
    if cfg.highlight.window > max {
        return Err(CliError::config(format!(
            "window {} exceeds the model's max_seq_len {max}",
            cfg.highlight.window
        )));
    }
    let result = detect_highlights(&corpus.instances[0], &model, &vocab, &cfg.highlight)?;

    let out = out_dir(&args.common, DEFAULT_HIGHLIGHT_OUT)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;
    write_json(&out.join(SEGMENTS_JSON), &result.segments)?;
    write_text(&out.join(SEGMENTS_CSV), &segments_to_csv(&result.segments))?;
    write_json(&out.join(WINDOWS_FILE), &result)?;
    Ok(serde_json::to_value(&result.segments).expect("segments serialize"))
}
