use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use layercollapse::io::save_checkpoint;
use layercollapse::nn::{init_model, ArchSpec, Layer};
use layercollapse::Model;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layercollapse"))
        .args(args)
        .current_dir(dir)
        .env("LC_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = rows[0]
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    rows[1..].iter().map(|r| r[i].clone()).collect()
}

const BLOBS: &str = r#"{
  "model": {"arch": {"input": [2], "layers": [
    {"type": "block", "hidden": 8, "out": 8, "batch_norm": true, "dropout": 0.1},
    {"type": "block", "hidden": 8, "out": 3}
  ]}},
  "data": {"generator": "blobs", "n": 300, "classes": 3},
  "train": {"epochs": 3, "batch_size": 16, "lr": 0.01, "max_epochs_per_layer": 2, "total_epoch_cap": 3},
  "reg": {"lc": 1.0},
  "bound": {"samples": 400}
}"#;

fn blobs_config(dir: &Path) {
    fs::write(dir.join("run.json"), BLOBS).unwrap();
}

#[test]
fn gain_report_vgg16() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gain-report", "--family", "vgg16", "--out", "r"]);
    let t1 = csv(&dir.path().join("r/mlp_share.csv"));
    assert_eq!(column(&t1, "model"), ["VGG16"]);
    let share: f64 = column(&t1, "params_share_pct")[0].parse().unwrap();
    assert!((share - 71.2).abs() <= 0.5, "{share}");
    assert!(dir.path().join("r/collapse_totals.csv").exists());
}

#[test]
fn gain_report_rejects_unknown_family() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gain-report", "--family", "resnet50"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[lookup]:"), "{err}");
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path());
    ok(dir.path(), &["train", "-c", "run.json", "--out", "a"]);
    ok(dir.path(), &["train", "-c", "run.json", "--out", "b"]);
    let (a, b) = (
        fs::read(dir.path().join("a/model.lckp")).unwrap(),
        fs::read(dir.path().join("b/model.lckp")).unwrap(),
    );
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a/train_log.csv")).unwrap(),
        fs::read(dir.path().join("b/train_log.csv")).unwrap()
    );
    ok(dir.path(), &["train", "-c", "run.json", "--out", "c", "--seed", "5"]);
    assert_ne!(a, fs::read(dir.path().join("c/model.lckp")).unwrap());
}

#[test]
fn collapse_fuses_unit_slope_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec: ArchSpec = serde_json::from_str(
        r#"{"input": [3], "layers": [
            {"type": "block", "hidden": 6, "out": 4, "batch_norm": true},
            {"type": "block", "hidden": 5, "out": 2}
        ]}"#,
    )
    .unwrap();
    let mut m: Model = init_model(&spec, 1, false).unwrap();
    for name in m.block_names() {
        if let Some(Layer::Block(b)) = m.layer_mut(&name) {
            b.act.set_alpha(1.0);
        }
    }
    save_checkpoint(&m, &dir.path().join("ones.lckp")).unwrap();

    ok(dir.path(), &["eval", "--checkpoint", "ones.lckp", "--out", "before"]);
    ok(dir.path(), &["collapse", "--checkpoint", "ones.lckp", "--out", "c"]);
    ok(dir.path(), &["eval", "--checkpoint", "c/model.lckp", "--out", "after"]);

    let report = csv(&dir.path().join("c/collapse.csv"));
    assert_eq!(column(&report, "status"), ["collapsed", "collapsed"]);
    let removed: i64 = column(&report, "params_before")
        .iter()
        .zip(column(&report, "params_after"))
        .map(|(b, a)| b.parse::<i64>().unwrap() - a.parse::<i64>().unwrap())
        .sum();
    let params = |d: &str| -> i64 {
        column(&csv(&dir.path().join(d).join("eval.csv")), "params")[0]
            .parse()
            .unwrap()
    };
    assert_eq!(params("before") - params("after"), removed);
}

#[test]
fn finetune_then_sequential_collapse() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path());
    ok(dir.path(), &["train", "-c", "run.json", "--out", "t"]);
    ok(
        dir.path(),
        &[
            "finetune",
            "-c",
            "run.json",
            "--checkpoint",
            "t/model.lckp",
            "--epochs",
            "1",
            "--out",
            "f",
        ],
    );
    let log = csv(&dir.path().join("f/train_log.csv"));
    assert_eq!(column(&log, "epoch"), ["0", "0"]);
    ok(
        dir.path(),
        &[
            "collapse",
            "-c",
            "run.json",
            "--checkpoint",
            "f/model.lckp",
            "--sequential",
            "--out",
            "s",
        ],
    );
    let stages = csv(&dir.path().join("s/stages.csv"));
    assert_eq!(column(&stages, "block"), ["block1", "block0"]);
    let epochs: usize = column(&stages, "epochs")
        .iter()
        .map(|e| e.parse::<usize>().unwrap())
        .sum();
    assert!(epochs <= 3);
    assert!(dir.path().join("s/model.lckp").exists());
}

#[test]
fn sensitivity_and_bound_check() {
    let dir = tempfile::tempdir().unwrap();
    blobs_config(dir.path());
    ok(dir.path(), &["train", "-c", "run.json", "--out", "t"]);
    ok(
        dir.path(),
        &[
            "sensitivity",
            "-c",
            "run.json",
            "--checkpoint",
            "t/model.lckp",
            "--tau",
            "1",
            "--out",
            "s",
        ],
    );
    let sweep = csv(&dir.path().join("s/sensitivity.csv"));
    assert_eq!(column(&sweep, "layers_collapsed"), ["0", "1", "2"]);

    ok(
        dir.path(),
        &[
            "bound-check",
            "-c",
            "run.json",
            "--checkpoint",
            "t/model.lckp",
            "--out",
            "b",
        ],
    );
    let bound = csv(&dir.path().join("b/bound.csv"));
    assert_eq!(bound.len(), 1 + 2 * 3);
    for r in column(&bound, "operator_violation_rate") {
        assert_eq!(r.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn demo_fig1_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fig.json"), r#"{"fig1": {"samples": 40, "hidden": 8}}"#).unwrap();
    ok(
        dir.path(),
        &["demo-fig1", "-c", "fig.json", "--epochs", "5", "--out", "f"],
    );
    let settings = csv(&dir.path().join("f/fig1_settings.csv"));
    assert_eq!(
        column(&settings, "setting"),
        ["alpha=0", "alpha=0.5", "alpha=1", "learned"]
    );
    let curve = csv(&dir.path().join("f/fig1_curve.csv"));
    assert_eq!(curve[0].len(), 6);
}

#[test]
fn config_errors_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"trian": {}, "train": {"epoch": 3}, "data": {"nn": 1}}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["train", "-c", "bad.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]:"), "{err}");
    for key in ["trian", "train.epoch", "data.nn"] {
        assert!(err.contains(key), "{key} missing from {err}");
    }
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval", "--checkpoint", "absent.lckp"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[io]:") && err.contains("absent.lckp"), "{err}");
    let out = run(dir.path(), &["train", "-c", "nowhere.json"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.lckp"), b"NOPE\x01\x00\x00\x00").unwrap();
    let out = run(dir.path(), &["eval", "--checkpoint", "x.lckp"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[format]:") && err.contains("byte 0"), "{err}");
}

#[test]
fn log_level_is_read_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let quiet = run(dir.path(), &["gain-report", "--family", "vgg11"]);
    assert!(quiet.stderr.is_empty());
    let loud = Command::new(env!("CARGO_BIN_EXE_layercollapse"))
        .args(["gain-report", "--family", "vgg11"])
        .current_dir(dir.path())
        .env("LC_LOG_LEVEL", "info")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&loud.stderr).contains("mlp_share.csv"));
}
