//! On-disk formats exercised through the filesystem.

use std::fs;

use vad_core::data::codec::{HEADER_LEN, MAGIC};
use vad_core::data::{read_feature_file, write_feature_file, CropMode, Dataset, FeatureFile, Manifest};
use vad_core::training::{load_checkpoint, save_checkpoint, train, TrainConfig};
use vad_core::{Error, Label, SynthConfig};

fn feature(crops: usize, t: usize, d: usize, fill: f32) -> FeatureFile {
    let data = (0..crops * t * d).map(|i| fill + i as f32 * 0.25).collect();
    FeatureFile::new(crops, t, d, data).unwrap()
}

#[test]
fn feature_file_size_and_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.vswf");
    let f = feature(10, 32, 1024, -3.0);
    write_feature_file(&p, &f).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 10 * 32 * 1024 * 4);
    assert_eq!(bytes[..4], MAGIC);
    assert_eq!(read_feature_file(&p).unwrap(), f);
}

#[test]
fn corrupt_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.vswf");
    write_feature_file(&p, &feature(1, 4, 8, 0.5)).unwrap();
    let good = fs::read(&p).unwrap();

    fs::write(&p, &good[..good.len() - 3]).unwrap();
    assert!(matches!(read_feature_file(&p), Err(Error::Truncated { .. })));

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&p, &bad).unwrap();
    assert!(matches!(read_feature_file(&p), Err(Error::BadMagic { .. })));

    fs::write(&p, &good[..10]).unwrap();
    assert!(matches!(read_feature_file(&p), Err(Error::Truncated { .. })));
}

#[test]
fn manifest_with_mixed_crops_and_real_style_paths() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("feats")).unwrap();
    write_feature_file(dir.path().join("feats/a.vswf"), &feature(10, 32, 12, 1.0)).unwrap();
    write_feature_file(dir.path().join("feats/b.vswf"), &feature(1, 32, 12, 2.0)).unwrap();
    fs::write(dir.path().join("b.txt"), "0".repeat(500) + "\n").unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        concat!(
            r#"{"id": "a", "feature_path": "feats/a.vswf", "label": "Abnormal", "num_frames": 512}"#,
            "\n\n",
            r#"{"id": "b", "feature_path": "feats/b.vswf", "label": "normal", "num_frames": 500, "frame_labels_path": "b.txt"}"#,
            "\n"
        ),
    )
    .unwrap();
    let m = Manifest::load(&manifest).unwrap();
    assert_eq!(m.entries[0].label, Label::Abnormal);
    let ds = Dataset::from_manifest(&m, CropMode::Mean).unwrap();
    assert_eq!(ds.videos[0].features.shape(), &[32, 12]);
    assert_eq!(ds.videos[1].frame_labels.as_ref().unwrap().len(), 500);
    let first = Dataset::from_manifest(&m, CropMode::Select(0)).unwrap();
    assert_ne!(first.videos[0].features, ds.videos[0].features);
}

#[test]
fn manifest_errors_name_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        r#"{"id": "ghost", "feature_path": "missing.vswf", "label": "normal", "num_frames": 512}"#,
    )
    .unwrap();
    let err = Dataset::load(&manifest, CropMode::Mean).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");

    fs::write(&manifest, "{\"id\": 3}\n").unwrap();
    assert!(matches!(Manifest::load(&manifest), Err(Error::Manifest { line: 1, .. })));
}

#[test]
fn checkpoint_file_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = vad_core::data::synth_generate(
        &SynthConfig {
            n_normal: 3,
            n_abnormal: 3,
            n_test_normal: 0,
            n_test_abnormal: 0,
            snippets: 4,
            dim: 8,
            ..SynthConfig::default()
        },
        dir.path(),
    )
    .unwrap();
    let ds = Dataset::load(&out.train_manifest, CropMode::Mean).unwrap();
    let ckpt = train(
        &ds,
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .checkpoint;

    let p = dir.path().join("m.vadc");
    save_checkpoint(&p, &ckpt).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.encode(), fs::read(&p).unwrap());

    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"VSWF");
    fs::write(&p, &bad).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::BadMagic { .. })));
}
