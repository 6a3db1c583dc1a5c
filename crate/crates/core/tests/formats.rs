use std::fs;
use std::path::Path;

use avtransformer::checkpoint::{load_checkpoint, save_checkpoint};
use avtransformer::data::{
    generate_synthetic, load_dataset, read_embedding, write_dataset, write_embedding, FrameSeq, Split, SyntheticSpec,
};
use avtransformer::model::{init_params, ModelConfig};
use avtransformer::{Error, RandomSource};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        audio_dim: 3,
        video_dim: 5,
        frames: 4,
        train_clips: 30,
        val_clips: 6,
        test_clips: 4,
        span_max: 3,
        class_prior: vec![0.5; 3],
        ..SyntheticSpec::with_classes(3)
    }
}

fn rewrite(manifest: &Path, edit: impl Fn(&str) -> String) {
    let text = fs::read_to_string(manifest).unwrap();
    fs::write(manifest, edit(&text)).unwrap();
}

#[test]
fn manifest_round_trip_preserves_every_clip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small_spec()).unwrap();
    let manifest = write_dataset(dir.path(), &data.dataset).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded, data.dataset);
    assert_eq!((loaded.train.len(), loaded.val.len(), loaded.test.len()), (30, 6, 4));
    assert_eq!(loaded.split(Split::Val)[0].id, "val-00000");
}

#[test]
fn manifest_errors_name_the_clip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small_spec()).unwrap();
    let manifest = write_dataset(dir.path(), &data.dataset).unwrap();
    let original = fs::read_to_string(&manifest).unwrap();

    rewrite(&manifest, |t| {
        t.replacen("\"id\":\"val-00001\"", "\"id\":\"val-00000\"", 1)
    });
    let err = load_dataset(&manifest).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("val-00000")), "{err}");

    fs::write(&manifest, &original).unwrap();
    let line = original.lines().find(|l| l.contains("\"test-00002\"")).unwrap();
    let broken = line.replace("\"labels\":[", "\"labels\":[0,");
    rewrite(&manifest, |t| t.replace(line, &broken));
    let err = load_dataset(&manifest).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("test-00002")), "{err}");

    fs::write(&manifest, &original).unwrap();
    fs::remove_file(dir.path().join("video/train-00007.avte")).unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("train-00007")), "{err}");

    assert!(matches!(
        load_dataset(&dir.path().join("absent.jsonl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn embedding_files_round_trip_and_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/clip.avte");
    let frames = FrameSeq::new(2, 3, vec![0.5, -1.25, 3.0, f32::MIN_POSITIVE, 7.0, -0.0]).unwrap();
    write_embedding(&path, &frames).unwrap();
    assert_eq!(read_embedding(&path).unwrap(), frames);

    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(20);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_embedding(&path), Err(Error::Format { offset: 20, .. })));
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_embedding(&path), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        n_blocks: 1,
        d_model: 6,
        d_ff: 4,
        n_classes: 2,
        audio_dim: 3,
        video_dim: 5,
        ..ModelConfig::default()
    };
    let (_, params) = init_params(&cfg, &mut RandomSource::new(4)).unwrap();
    let path = dir.path().join("model.avtm");
    save_checkpoint(&path, &cfg, &params).unwrap();
    let (cfg2, params2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert!(params2.bit_identical(&params));
    assert!(!dir.path().join("model.avtm.tmp").exists());

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let len = bytes.len() as u64 - 3;
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset, .. }) if offset == len));
}
