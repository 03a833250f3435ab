use magfuse::data::{generate_synthetic, GenConfig};
use magfuse::train::{adam_step, evaluate, train, AdamConfig, AdamState, LossKind};
use magfuse::{
    Corpus, Graph64, Model64, ModelConfig, Pass, Splits, Tensor64, TrainConfig, TrainError,
};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

/// Learning rate and dropout of the shipped toy recipe.
fn toy_train(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-3,
        dropout_p: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

fn toy_model(c: &Corpus, seed: u64) -> Model64 {
    let cfg = ModelConfig::default().with_data_dims(c.vocab.len(), c.d_visual, c.d_acoustic);
    Model64::new(cfg, seed).unwrap()
}

fn same(c: &Corpus) -> Splits {
    Splits {
        train: c.clone(),
        val: c.clone(),
        test: c.clone(),
    }
}

/// Straight-line Adam with bias correction on one scalar.
struct ReferenceAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, w: f64, g: f64, lr: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        w - lr * mh / (vh.sqrt() + 1e-8)
    }
}

#[test]
fn adam_minimises_a_quadratic() {
    let cfg = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    let mut params = vec![Tensor64::scalar(0.0)];
    let mut state = AdamState::new();
    let mut reference = ReferenceAdam {
        m: 0.0,
        v: 0.0,
        t: 0,
    };
    let mut w_ref = 0.0;
    for _ in 0..500 {
        let w = params[0].data()[0];
        params[0].zero_grad();
        params[0].accumulate_grad(&[2.0 * (w - 3.0)]);
        adam_step(&mut params, &mut state, &cfg).unwrap();
        w_ref = reference.step(w_ref, 2.0 * (w_ref - 3.0), 0.1);
        assert!((params[0].data()[0] - w_ref).abs() < 1e-12);
    }
    assert!((params[0].data()[0] - 3.0).abs() < 1e-3);
    assert_eq!(state.t, 500);
}

#[test]
fn adam_with_zero_gradient_only_counts() {
    let mut params = vec![Tensor64::vector(vec![1.0, -2.0]).unwrap()];
    let mut state = AdamState::new();
    adam_step(&mut params, &mut state, &AdamConfig::default()).unwrap();
    assert_eq!(params[0].data(), &[1.0, -2.0]);
    assert_eq!(state.t, 1);
}

/// Mean absolute error of the whole corpus in training mode with no
/// dropout, and its gradient.
fn full_batch_gradient(model: &Model64, c: &Corpus) -> Vec<Vec<f64>> {
    let mut g = Graph64::new();
    let bound = model.params().attach(&mut g).unwrap();
    let mut rng = Xoshiro256StarStar::seed_from_u64(0);
    let mut total = None;
    for inst in &c.instances {
        let mut pass = Pass::new(&mut g, &bound, true, &mut rng);
        let out = model.forward(&mut pass, &c.encode(inst), true).unwrap();
        let y = g.leaf(Tensor64::filled(vec![1, 1], inst.label)).unwrap();
        let d = g.sub(out.intensity, y).unwrap();
        let d = g.abs(d).unwrap();
        let d = g.sum(d).unwrap();
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d).unwrap(),
        });
    }
    let loss = g.scale(total.unwrap(), 1.0 / c.len() as f64).unwrap();
    g.backward(loss).unwrap();
    bound
        .iter()
        .zip(model.params().tensors())
        .map(|(v, t)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

#[test]
fn full_batch_epochs_match_reference_steps() {
    let c = generate_synthetic(12, 1, &GenConfig::default()).unwrap();
    let cfg = TrainConfig {
        dropout_p: 0.0,
        batch_size: c.len(),
        learning_rate: 1e-2,
        ..toy_train(0, 1)
    };

    let mut one = toy_model(&c, 2);
    let start = one.clone();
    let out = train(&mut one, &same(&c), &cfg).unwrap();
    assert_eq!(out.optimizer_steps, 1);
    assert_eq!(out.log.records.len(), 1);

    let mut manual = start.clone();
    manual.set_dropout(0.0, 0.0);
    let mut refs: Vec<Vec<ReferenceAdam>> = manual
        .params()
        .tensors()
        .iter()
        .map(|t| {
            (0..t.numel())
                .map(|_| ReferenceAdam {
                    m: 0.0,
                    v: 0.0,
                    t: 0,
                })
                .collect()
        })
        .collect();
    let mut reference_step = |m: &mut Model64| {
        let grads = full_batch_gradient(m, &c);
        for ((t, g), r) in m
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut refs)
        {
            for ((w, &gi), ri) in t.data_mut().iter_mut().zip(g).zip(r.iter_mut()) {
                *w = ri.step(*w, gi, 1e-2);
            }
        }
    };
    reference_step(&mut manual);
    for (a, b) in one.params().tensors().iter().zip(manual.params().tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    // a second step must use only the second batch's gradient
    let mut two = start.clone();
    let cfg2 = TrainConfig { epochs: 2, ..cfg };
    let out = train(&mut two, &same(&c), &cfg2).unwrap();
    assert_eq!(out.optimizer_steps, 2);
    reference_step(&mut manual);
    let expected = if out.best_epoch == 2 { &manual } else { &one };
    for (a, b) in two
        .params()
        .tensors()
        .iter()
        .zip(expected.params().tensors())
    {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let c = generate_synthetic(40, 3, &GenConfig::default()).unwrap();
    let splits = magfuse::data::split(&c, &magfuse::SplitSpec::default()).unwrap();
    let run = || {
        let mut m = toy_model(&splits.train, 4);
        let out = train(&mut m, &splits, &toy_train(5, 3)).unwrap();
        (m, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    for (a, b) in m1.params().tensors().iter().zip(m2.params().tensors()) {
        let bits = |t: &Tensor64| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    for (a, b) in o1.log.records.iter().zip(&o2.log.records) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.val, b.val);
    }
    let (m3, _) = {
        let mut m = toy_model(&splits.train, 4);
        let out = train(&mut m, &splits, &toy_train(6, 3)).unwrap();
        (m, out)
    };
    assert_ne!(m1.params().tensors(), m3.params().tensors());
}

#[test]
fn train_loss_falls_over_the_first_epochs() {
    let mut curves = Vec::new();
    for seed in 0..5 {
        let c = generate_synthetic(64, 100 + seed, &GenConfig::default()).unwrap();
        let mut m = toy_model(&c, seed);
        let out = train(&mut m, &same(&c), &toy_train(seed, 5)).unwrap();
        curves.push(
            out.log
                .records
                .iter()
                .map(|r| r.train_loss)
                .collect::<Vec<_>>(),
        );
    }
    let median: Vec<f64> = (0..5)
        .map(|e| {
            let mut col: Vec<f64> = curves.iter().map(|c| c[e]).collect();
            col.sort_by(f64::total_cmp);
            col[2]
        })
        .collect();
    assert!(
        median.windows(2).all(|w| w[1] < w[0]),
        "median curve {median:?}"
    );
}

#[test]
fn run_log_has_one_record_per_epoch() {
    let c = generate_synthetic(20, 4, &GenConfig::default()).unwrap();
    let splits = magfuse::data::split(&c, &magfuse::SplitSpec::default()).unwrap();
    let mut m = toy_model(&splits.train, 0);
    let out = train(&mut m, &splits, &toy_train(0, 4)).unwrap();
    let log = &out.log;
    assert_eq!(log.records.len(), 4);
    assert!(log.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
    assert_eq!(log.to_jsonl().lines().count(), 4);
    let csv = log.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,train_loss,val_accuracy,val_f1,val_mae,val_corr,wall_time_s"
    );
    let first: serde_json::Value =
        serde_json::from_str(log.to_jsonl().lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val", "wall_time_s"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn returned_weights_are_the_best_epoch() {
    let c = generate_synthetic(60, 5, &GenConfig::default()).unwrap();
    let splits = magfuse::data::split(&c, &magfuse::SplitSpec::default()).unwrap();
    let mut m = toy_model(&splits.train, 1);
    let out = train(&mut m, &splits, &toy_train(1, 8)).unwrap();
    let best = out
        .log
        .records
        .iter()
        .map(|r| r.val.mae)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.log.best_epoch().unwrap().epoch, out.best_epoch);
    assert_eq!(evaluate(&m, &splits.val).unwrap().mae, best);
    // the run's dropout override does not leak into the model
    assert_eq!(m.dropout(), (0.5, 0.5));
}

#[test]
fn emotion_targets_train_the_emotion_head() {
    let gen = GenConfig {
        emotions: true,
        ..GenConfig::default()
    };
    let c = generate_synthetic(32, 6, &gen).unwrap();
    let mut cfg = ModelConfig::default().with_data_dims(c.vocab.len(), c.d_visual, c.d_acoustic);
    cfg.emotion_head = true;
    let mut m = Model64::new(cfg, 2).unwrap();
    let before = evaluate(&m, &c).unwrap().emotion_mae.unwrap();
    train(&mut m, &same(&c), &toy_train(2, 30)).unwrap();
    let after = evaluate(&m, &c).unwrap().emotion_mae.unwrap();
    assert!(after.iter().sum::<f64>() < before.iter().sum::<f64>());
}

#[test]
fn mse_loss_also_trains() {
    let c = generate_synthetic(32, 7, &GenConfig::default()).unwrap();
    let mut m = toy_model(&c, 3);
    let cfg = TrainConfig {
        loss: LossKind::Mse,
        ..toy_train(3, 10)
    };
    let out = train(&mut m, &same(&c), &cfg).unwrap();
    let first = out.log.records.first().unwrap().train_loss;
    let last = out.log.records.last().unwrap().train_loss;
    assert!(last < first);
}

#[test]
fn bad_inputs_are_reported() {
    let c = generate_synthetic(10, 8, &GenConfig::default()).unwrap();
    let mut cfg = ModelConfig::default().with_data_dims(c.vocab.len(), 5, c.d_acoustic);
    let mut m = Model64::new(cfg.clone(), 0).unwrap();
    assert!(matches!(
        train(&mut m, &same(&c), &toy_train(0, 1)),
        Err(TrainError::DimMismatch(_))
    ));

    cfg = ModelConfig::default().with_data_dims(c.vocab.len(), c.d_visual, c.d_acoustic);
    cfg.encoder.max_seq_len = 3;
    let mut m = Model64::new(cfg, 0).unwrap();
    assert!(matches!(
        train(&mut m, &same(&c), &toy_train(0, 1)),
        Err(TrainError::DimMismatch(_))
    ));

    let mut m = toy_model(&c, 0);
    let zero_epochs = TrainConfig {
        epochs: 0,
        ..toy_train(0, 1)
    };
    assert!(matches!(
        train(&mut m, &same(&c), &zero_epochs),
        Err(TrainError::Config(_))
    ));

    let huge = TrainConfig {
        learning_rate: 1e300,
        loss: LossKind::Mse,
        ..toy_train(0, 5)
    };
    match train(&mut m, &same(&c), &huge) {
        Err(TrainError::NonFinite { epoch, detail, .. }) => {
            assert!(epoch >= 1);
            assert!(!detail.is_empty());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
