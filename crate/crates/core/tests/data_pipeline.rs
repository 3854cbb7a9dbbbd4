//! Image IO, dataset layout, toy data generation, training-pair assembly,
//! and checkpoint round trips.

use dmdd_core::checkpoint;
use dmdd_core::config::{BackboneKind, RunConfig};
use dmdd_core::data::{
    load_dataset, load_image_raw, load_mask, make_training_pair, save_gray, save_rgb, Label,
    Normalization, Split, Synthesizer, TextureSource,
};
use dmdd_core::error::Error;
use dmdd_core::model::DmddModel;
use dmdd_core::tensor::from_vec;
use dmdd_core::toy::{generate_toy_dataset, ToySpec};
use dmdd_core::trainer;
use std::path::Path;

const SPEC: ToySpec = ToySpec {
    size: 32,
    train_normal: 6,
    test_normal: 3,
    test_defect: 4,
};

fn toy_root(dir: &Path, seed: u64) {
    generate_toy_dataset(dir, "toy_shapes", seed, &SPEC).unwrap();
}

#[test]
fn normalization_roundtrip_is_identity() {
    let norm = Normalization::default();
    let raw = from_vec(&[3, 4, 4], (0..48).map(|i| i as f64 / 47.0).collect());
    let back = norm.invert(&norm.apply(&raw));
    let max_d = raw
        .iter()
        .zip(back.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_d < 1e-12);
}

#[test]
fn image_save_load_roundtrip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.png");
    let raw = from_vec(&[3, 8, 8], (0..192).map(|i| (i % 97) as f64 / 96.0).collect());
    save_rgb(&path, &raw).unwrap();
    let back = load_image_raw(&path, 8).unwrap();
    let max_d = raw
        .iter()
        .zip(back.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_d <= 0.5 / 255.0 + 1e-12, "round trip error {max_d}");
    // Resize path resamples to the requested square size.
    let up = load_image_raw(&path, 16).unwrap();
    assert_eq!(up.shape(), [3, 16, 16]);
}

#[test]
fn mask_save_load_roundtrip_is_exact_and_binary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.png");
    let mut mask = vec![0.0; 64];
    for p in [0, 9, 10, 11, 36, 63] {
        mask[p] = 1.0;
    }
    let mask = from_vec(&[8, 8], mask);
    save_gray(&path, &mask).unwrap();
    let back = load_mask(&path, 8).unwrap();
    assert!(mask.iter().zip(back.iter()).all(|(a, b)| a == b));
    // Upscaling keeps the mask binary: nearest neighbor, no gray halo.
    let up = load_mask(&path, 32).unwrap();
    assert!(up.iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(up[[0, 0]], 1.0);
}

#[test]
fn toy_dataset_has_expected_layout_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    toy_root(dir.path(), 11);

    let train = load_dataset(dir.path(), "toy_shapes", Split::Train).unwrap();
    assert_eq!(train.entries.len(), 6);
    assert!(train
        .entries
        .iter()
        .all(|e| e.label == Label::Normal && e.mask_path.is_none()));

    let test = load_dataset(dir.path(), "toy_shapes", Split::Test).unwrap();
    assert_eq!(test.entries.len(), 7);
    let normal = test.entries.iter().filter(|e| e.label == Label::Normal).count();
    let defect = test.entries.iter().filter(|e| e.label == Label::Anomalous).count();
    assert_eq!((normal, defect), (3, 4));
    for e in &test.entries {
        match e.label {
            Label::Normal => assert!(e.mask_path.is_none()),
            Label::Anomalous => {
                let mask = load_mask(e.mask_path.as_ref().unwrap(), SPEC.size).unwrap();
                assert!(mask.iter().any(|&v| v == 1.0), "empty defect mask");
            }
        }
    }
}

#[test]
fn toy_dataset_generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    toy_root(a.path(), 5);
    toy_root(b.path(), 5);
    for rel in [
        "toy_shapes/train/good/000.png",
        "toy_shapes/test/defect/001.png",
        "toy_shapes/ground_truth/defect/001_mask.png",
    ] {
        let xa = std::fs::read(a.path().join(rel)).unwrap();
        let xb = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(xa, xb, "{rel} differs between generations");
    }
}

#[test]
fn missing_dataset_paths_error_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    match load_dataset(dir.path(), "nope", Split::Train) {
        Err(Error::DatasetNotFound(_)) => {}
        other => panic!("expected DatasetNotFound, got {other:?}"),
    }
    // A defect image without its mask is corrupt, not merely missing.
    toy_root(dir.path(), 1);
    let mask = dir
        .path()
        .join("toy_shapes/ground_truth/defect/000_mask.png");
    std::fs::remove_file(&mask).unwrap();
    match load_dataset(dir.path(), "toy_shapes", Split::Test) {
        Err(Error::CorruptDataset(_)) => {}
        other => panic!("expected CorruptDataset, got {other:?}"),
    }
}

#[test]
fn training_pair_assembly_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    toy_root(dir.path(), 2);
    let train = load_dataset(dir.path(), "toy_shapes", Split::Train).unwrap();
    let cfg = RunConfig {
        input_size: 32,
        ..RunConfig::default()
    };
    let textures = TextureSource::from_config(&cfg.synthesis, &train).unwrap();
    let synth = Synthesizer {
        cfg: &cfg.synthesis,
        textures: &textures,
        norm: Normalization::default(),
        input_size: 32,
    };
    let entry = &train.entries[0];
    let raw = load_image_raw(&entry.image_path, 32).unwrap();
    let a = make_training_pair(&raw, Some(&entry.image_path), &synth, 77).unwrap();
    let b = make_training_pair(&raw, Some(&entry.image_path), &synth, 77).unwrap();
    assert!(a
        .anomalous
        .iter()
        .zip(b.anomalous.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.gt_mask.iter().zip(b.gt_mask.iter()).all(|(x, y)| x == y));
    assert_eq!(a.beta, b.beta);
    let c = make_training_pair(&raw, Some(&entry.image_path), &synth, 78).unwrap();
    assert!(
        a.anomalous.iter().zip(c.anomalous.iter()).any(|(x, y)| x != y),
        "different seeds produced identical pairs"
    );
}

#[test]
fn checkpoint_roundtrip_restores_exact_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt/model.ckpt");
    let cfg = RunConfig {
        backbone: BackboneKind::Toy,
        input_size: 32,
        seed: 9,
        ..RunConfig::default()
    };
    let mut model = DmddModel::new(&cfg).unwrap();
    // Move parameters off init so the roundtrip carries real content.
    for id in model.student.ids().collect::<Vec<_>>() {
        let t = model.student.value(id).clone();
        *model.student.value_mut(id) = t.mapv(|v| v + 0.01);
    }
    let fp = cfg.fingerprint();
    checkpoint::save(
        &path,
        &fp,
        3,
        cfg.seed,
        &[("student", &model.student), ("head", &model.head)],
    )
    .unwrap();

    let mut fresh = DmddModel::new(&cfg).unwrap();
    assert_ne!(fresh.student_hash(), model.student_hash());
    let meta = checkpoint::load_into(
        &path,
        &fp,
        false,
        &mut [("student", &mut fresh.student), ("head", &mut fresh.head)],
    )
    .unwrap();
    assert_eq!(meta.epoch, 3);
    assert_eq!(meta.seed, 9);
    assert_eq!(fresh.student_hash(), model.student_hash());
    assert_eq!(fresh.head_hash(), model.head_hash());
}

#[test]
fn checkpoint_rejects_fingerprint_mismatch_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = RunConfig {
        input_size: 32,
        ..RunConfig::default()
    };
    let model = DmddModel::new(&cfg).unwrap();
    checkpoint::save(&path, "fp-a", 1, 0, &[("student", &model.student)]).unwrap();

    let mut target = DmddModel::new(&cfg).unwrap();
    match checkpoint::load_into(&path, "fp-b", false, &mut [("student", &mut target.student)]) {
        Err(Error::FingerprintMismatch { expected, found }) => {
            assert_eq!(expected, "fp-b");
            assert_eq!(found, "fp-a");
        }
        other => panic!("expected FingerprintMismatch, got {other:?}"),
    }
    checkpoint::load_into(&path, "fp-b", true, &mut [("student", &mut target.student)]).unwrap();
    assert_eq!(target.student_hash(), model.student_hash());
}

#[test]
fn checkpoint_rejects_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = RunConfig {
        input_size: 32,
        ..RunConfig::default()
    };
    let model = DmddModel::new(&cfg).unwrap();
    checkpoint::save(&path, "fp", 1, 0, &[("student", &model.student)]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn evaluating_a_single_class_split_is_an_undefined_metric() {
    let dir = tempfile::tempdir().unwrap();
    toy_root(dir.path(), 3);
    let cfg = RunConfig {
        backbone: BackboneKind::Toy,
        input_size: 32,
        dataset_root: dir.path().to_string_lossy().into_owned(),
        category: "toy_shapes".into(),
        ..RunConfig::default()
    };
    let model = DmddModel::new(&cfg).unwrap();
    let train = load_dataset(dir.path(), "toy_shapes", Split::Train).unwrap();
    match trainer::evaluate_model_on(&model, &cfg, &train) {
        Err(Error::UndefinedMetric(_)) => {}
        other => panic!("expected UndefinedMetric, got {:?}", other.map(|o| o.report)),
    }
}
