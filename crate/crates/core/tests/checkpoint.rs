use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use partseg::config::{DatasetKind, TrainConfig};
use partseg::losses::TAP_NAMES;
use partseg::networks::PartSegModel;
use partseg::pipeline::{checkpoint_path, latest_checkpoint, load_checkpoint, load_model, save_checkpoint, TrainState, MODEL_FILE};
use partseg::Error;

fn toy_config(out: &Path) -> TrainConfig {
    TrainConfig::for_dataset(DatasetKind::Toy, out.join("data"), out)
}

fn state(cfg: &TrainConfig) -> TrainState {
    let model = PartSegModel::new(&cfg.model.network(), cfg.model.parts, cfg.dataset.image_size, DType::F32, &Device::Cpu).unwrap();
    model.init_all(5).unwrap();
    let mut s = TrainState::new(model, cfg.optimizer, TAP_NAMES.len(), 11);
    s.step = 42;
    s
}

#[test]
fn saved_parameters_come_back_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let original = state(&cfg);
    let dir = checkpoint_path(tmp.path(), original.step);
    save_checkpoint(&original, &cfg, &dir).unwrap();
    let restored = load_checkpoint(&dir, &cfg, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(restored.step, 42);
    let (a, b) = (original.model.params().to_tensors(), restored.model.params().to_tensors());
    assert_eq!(a.len(), b.len());
    for (name, t) in &a {
        let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = b[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y, "{name}");
    }
    let (model, meta) = load_model(&dir, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(meta.config, cfg);
    assert_eq!(model.dims, original.model.dims);
}

#[test]
fn changed_configuration_is_rejected_by_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let dir = tmp.path().join("ck");
    save_checkpoint(&state(&cfg), &cfg, &dir).unwrap();
    let mut other = cfg.clone();
    other.optimizer.lr *= 2.0;
    let err = load_checkpoint(&dir, &other, DType::F32, &Device::Cpu).err().unwrap();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }), "{err}");

    // paths and seed do not take part in the hash
    let mut moved = cfg.clone();
    moved.train.seed += 1;
    moved.output.dir = tmp.path().join("elsewhere");
    load_checkpoint(&dir, &moved, DType::F32, &Device::Cpu).unwrap();
}

#[test]
fn part_count_mismatch_names_both_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let dir = tmp.path().join("ck");
    save_checkpoint(&state(&cfg), &cfg, &dir).unwrap();
    let mut other = cfg.clone();
    other.model.parts = 6;
    let err = load_checkpoint(&dir, &other, DType::F32, &Device::Cpu).err().unwrap();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape(_)) && msg.contains("K=4") && msg.contains("K=6"), "{msg}");
}

#[test]
fn tampered_or_missing_files_fail_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    let dir = tmp.path().join("ck");
    save_checkpoint(&state(&cfg), &cfg, &dir).unwrap();
    let model = dir.join(MODEL_FILE);
    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&model, &bytes).unwrap();
    let err = load_model(&dir, DType::F32, &Device::Cpu).err().unwrap();
    assert!(matches!(err, Error::Integrity { .. }), "{err}");
    fs::remove_file(&model).unwrap();
    let err = load_checkpoint(&dir, &cfg, DType::F32, &Device::Cpu).err().unwrap();
    assert!(err.to_string().contains("missing"), "{err}");
}

#[test]
fn latest_snapshot_is_the_highest_complete_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path());
    assert!(latest_checkpoint(tmp.path()).is_none());
    let mut s = state(&cfg);
    for step in [9, 100, 30] {
        s.step = step;
        save_checkpoint(&s, &cfg, &checkpoint_path(tmp.path(), step)).unwrap();
    }
    // a directory without meta.json is an interrupted save
    fs::create_dir_all(checkpoint_path(tmp.path(), 500)).unwrap();
    assert_eq!(latest_checkpoint(tmp.path()).unwrap(), checkpoint_path(tmp.path(), 100));
}
