use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, data: &Path, out: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::create_dir_all(dir).unwrap();
    fs::write(
        &path,
        format!(
            "[dataset]\nkind = \"toy\"\nroot = \"{}\"\n\n[train]\nbatch_size = 2\n\n[output]\ndir = \"{}\"\n{extra}",
            path_str(data),
            path_str(out)
        ),
    )
    .unwrap();
    path
}

/// Toy data and a 10-step checkpoint shared by the tests.
struct Fixture {
    data: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        let data = root.join("toy");
        let out = partseg(&["gen-toy", "--out-dir", path_str(&data), "--count", "40", "--seed", "3"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let config = write_config(&root, &data, &root.join("run"), "");
        let out = partseg(&["train", "--config", path_str(&config), "--steps", "10"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let checkpoint = root.join("run/checkpoints/step-0000010");
        Fixture { data, config, checkpoint }
    })
}

fn metrics_without_seconds(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn steps_override_writes_rows_and_checkpoint() {
    let f = fixture();
    let rows = metrics_without_seconds(&f.config.parent().unwrap().join("run"));
    assert_eq!(rows[0], "step,rec,cls,fg,bg,total,lr");
    assert_eq!(rows.len(), 11);
    assert!(rows[10].starts_with("10,"));
    assert!(f.checkpoint.join("meta.json").is_file());
    assert!(f.checkpoint.join("model.safetensors").is_file());
}

#[test]
fn same_seed_reproduces_metrics() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let out = partseg(&["train", "--config", path_str(&f.config), "--steps", "3", "--seed", "9", "--out-dir", path_str(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(metrics_without_seconds(&out_dir));
    }
    assert_eq!(runs[0].len(), 4);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = partseg(&["train", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn missing_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[dataset]\nkind = \"toy\"\n").unwrap();
    let out = partseg(&["train", "--config", path_str(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.root") && err.contains("output.dir"), "{err}");
}

#[test]
fn bad_arguments_exit_with_usage_status() {
    assert_eq!(partseg(&["train"]).status.code(), Some(2));
    assert_eq!(partseg(&["frobnicate"]).status.code(), Some(2));
    let f = fixture();
    let out = partseg(&["train", "--config", path_str(&f.config), "--device", "tpu", "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_writes_nothing() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("dry");
    let out = partseg(&["train", "--config", path_str(&f.config), "--dry-run", "--out-dir", path_str(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("config ok"));
    assert!(!out_dir.exists());
}

#[test]
fn eval_reports_both_metrics_reproducibly() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = partseg(&["eval", "--checkpoint", path_str(&f.checkpoint), "--out-dir", path_str(&dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.join("report.csv").is_file());
        reports.push(fs::read_to_string(dir.join("report.json")).unwrap());
    }
    let json: serde_json::Value = serde_json::from_str(&reports[0]).unwrap();
    assert!(json["mean_error"].is_number());
    assert!(json["mean_iou"].is_number());
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_rejects_mismatched_part_count() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &f.data, &tmp.path().join("o"), "\n[model]\nparts = 6\n");
    let out = partseg(&["eval", "--checkpoint", path_str(&f.checkpoint), "--config", path_str(&config)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K=4"));
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let copy = tmp.path().join("ck");
    fs::create_dir_all(&copy).unwrap();
    for entry in fs::read_dir(&f.checkpoint).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), copy.join(entry.file_name())).unwrap();
    }
    let model = copy.join("model.safetensors");
    let mut bytes = fs::read(&model).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    let out = partseg(&["eval", "--checkpoint", path_str(&copy)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn viz_names_follow_inputs() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let images = [f.data.join("images/00000.png"), f.data.join("images/00001.png")];
    let mut renders = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = partseg(&[
            "viz",
            "--checkpoint",
            path_str(&f.checkpoint),
            "--out-dir",
            path_str(&dir),
            path_str(&images[0]),
            path_str(&images[1]),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["00000_parts.png", "00001_parts.png"]);
        renders.push(fs::read(dir.join("00000_parts.png")).unwrap());
    }
    assert_eq!(renders[0], renders[1]);
}

#[test]
fn transfer_grid_has_one_cell_per_pair() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let img = |i: usize| f.data.join(format!("images/{i:05}.png"));
    let (a0, a1, s0, s1, s2) = (img(0), img(1), img(2), img(3), img(4));
    let mut grids = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = partseg(&[
            "transfer",
            "--checkpoint",
            path_str(&f.checkpoint),
            "--appearance",
            path_str(&a0),
            path_str(&a1),
            "--shape",
            path_str(&s0),
            path_str(&s1),
            path_str(&s2),
            "--out-dir",
            path_str(&dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        grids.push(fs::read(dir.join("transfer.png")).unwrap());
    }
    let decoded = image::load_from_memory(&grids[0]).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (64 * 4, 64 * 3));
    assert_eq!(grids[0], grids[1]);
}
