use magfuse::data::{generate_synthetic, GenConfig};
use magfuse::encoder::PositionEncoding;
use magfuse::train::{
    load_checkpoint, save_checkpoint, CheckpointError, MANIFEST_FILE, WEIGHTS_FILE,
};
use magfuse::{Model32, Model64, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use std::fs;

fn model(d_model: usize, seed: u64) -> (Model64, magfuse::Vocabulary) {
    let c = generate_synthetic(8, 0, &GenConfig::default()).unwrap();
    let mut cfg = ModelConfig::default().with_data_dims(c.vocab.len(), c.d_visual, c.d_acoustic);
    cfg.encoder.d_model = d_model;
    cfg.mag.d_model = d_model;
    cfg.emotion_head = true;
    cfg.encoder.variant = PositionEncoding::RelativeBias;
    let mut m = Model64::new(cfg, seed).unwrap();
    // overwrite everything with arbitrary bit patterns, including ones that
    // do not survive a decimal round trip
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    for t in m.params_mut().tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random::<f64>() * 1e3 - 5e2);
    }
    (m, c.vocab)
}

#[test]
fn round_trip_is_bit_exact() {
    let (m, vocab) = model(8, 1);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &vocab, dir.path()).unwrap();
    let ck = load_checkpoint::<f64>(dir.path()).unwrap();
    assert_eq!(ck.manifest.config, *m.config());
    assert_eq!(ck.manifest.vocabulary, vocab);
    let names: Vec<_> = ck.manifest.params.iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, m.params().names());
    let (back, back_vocab) = ck.into_model().unwrap();
    assert_eq!(back_vocab, vocab);
    for (a, b) in back.params().tensors().iter().zip(m.params().tensors()) {
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &magfuse::Tensor64| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    let bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
    assert_eq!(bytes.len(), m.params().numel() * 8);
    let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
    assert_eq!(first.to_bits(), m.params().tensors()[0].data()[0].to_bits());
}

#[test]
fn single_precision_models_round_trip() {
    let c = generate_synthetic(8, 0, &GenConfig::default()).unwrap();
    let cfg = ModelConfig::default().with_data_dims(c.vocab.len(), c.d_visual, c.d_acoustic);
    let m = Model32::new(cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &c.vocab, dir.path()).unwrap();
    let (back, _) = load_checkpoint::<f32>(dir.path())
        .unwrap()
        .into_model()
        .unwrap();
    assert_eq!(back.params().tensors(), m.params().tensors());
}

#[test]
fn truncated_payload_is_corrupt() {
    let (m, vocab) = model(8, 2);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &vocab, dir.path()).unwrap();
    let path = dir.path().join(WEIGHTS_FILE);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match load_checkpoint::<f64>(dir.path()) {
        Err(CheckpointError::Corrupt { expected, found }) => {
            assert_eq!(expected, bytes.len());
            assert_eq!(found, bytes.len() - 5);
        }
        other => panic!("expected corruption error, got {other:?}"),
    }
    fs::write(&path, [bytes.as_slice(), &[0u8; 8]].concat()).unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path()),
        Err(CheckpointError::Corrupt { .. })
    ));
}

#[test]
fn non_finite_payload_is_rejected() {
    let (m, vocab) = model(8, 3);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &vocab, dir.path()).unwrap();
    let path = dir.path().join(WEIGHTS_FILE);
    let mut bytes = fs::read(&path).unwrap();
    bytes[..8].copy_from_slice(&f64::NAN.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path()),
        Err(CheckpointError::NonFinite(name)) if name == "embed.token"
    ));
}

#[test]
fn other_shapes_name_the_parameter() {
    let (small, vocab) = model(8, 4);
    let (mut big, _) = model(16, 5);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&small, &vocab, dir.path()).unwrap();
    let ck = load_checkpoint::<f64>(dir.path()).unwrap();
    match ck.load_into(&mut big) {
        Err(CheckpointError::ShapeMismatch {
            name,
            expected,
            found,
        }) => {
            assert_eq!(name, "embed.token");
            assert_eq!(expected[1], 16);
            assert_eq!(found[1], 8);
            let msg = CheckpointError::ShapeMismatch {
                name,
                expected,
                found,
            }
            .to_string();
            assert!(msg.contains("embed.token"));
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn unknown_version_and_missing_files() {
    let (m, vocab) = model(8, 6);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &vocab, dir.path()).unwrap();
    let mpath = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).unwrap();
    fs::write(
        &mpath,
        text.replace("\"format_version\": 1", "\"format_version\": 2"),
    )
    .unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path()),
        Err(CheckpointError::UnsupportedVersion(2))
    ));
    fs::write(&mpath, "{").unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path()),
        Err(CheckpointError::Manifest(_))
    ));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(empty.path()),
        Err(CheckpointError::Io { .. })
    ));
}
