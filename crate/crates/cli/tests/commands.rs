use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use ced_cli::{run_command, Command, RunConfig};

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn golden_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&golden_dir().join("run.toml")).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn ced(args: &[&str]) -> std::process::Output {
    Proc::new(env!("CARGO_BIN_EXE_ced"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn eval_reproduces_golden_metrics() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = golden_config(out.path());
    cfg.data = Some(golden_dir());
    cfg.checkpoint = Some(golden_dir().join("model.ckpt"));
    run_command(Command::Eval, &cfg).unwrap();
    let got = fs::read(out.path().join("metrics.json")).unwrap();
    let want = fs::read(golden_dir().join("metrics.json")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(want).unwrap());
}

#[test]
fn synth_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_command(Command::Synth, &golden_config(a.path())).unwrap();
    run_command(Command::Synth, &golden_config(b.path())).unwrap();
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(golden_dir().join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 17);
    assert_eq!(manifest["counts"]["validation"], 5);
}

#[test]
fn manifest_reports_changepoint_statistics() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        num_streams: 1000,
        out: out.path().to_path_buf(),
        ..RunConfig::default()
    };
    cfg.generator.changepoint = 0.3;
    run_command(Command::Synth, &cfg).unwrap();
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("manifest.json")).unwrap()).unwrap();
    let frac = m["mean_changepoint_fraction"].as_f64().unwrap();
    assert!((frac - 0.3).abs() < 0.01, "{frac}");
    assert_eq!(m["counts"]["validation"], 100);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let data = tempfile::tempdir().unwrap();
    run_command(Command::Synth, &golden_config(data.path())).unwrap();
    let first = tempfile::tempdir().unwrap();
    let mut cfg = golden_config(first.path());
    cfg.data = Some(data.path().to_path_buf());
    run_command(Command::Train, &cfg).unwrap();

    let second = tempfile::tempdir().unwrap();
    let written = first.path().join("config.toml");
    let out = ced(&[
        "--config",
        written.to_str().unwrap(),
        "--out",
        second.path().to_str().unwrap(),
        "train",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "train_log.csv"] {
        assert_eq!(
            fs::read(first.path().join(f)).unwrap(),
            fs::read(second.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let log = fs::read_to_string(first.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,split,accuracy,early_rate,loss\n"));
}

#[test]
fn missing_inputs_fail_with_the_path() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let r = ced(&["--out", o, "--data", "/nonexistent/data.jsonl", "train"]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("/nonexistent/data.jsonl"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");

    let d = golden_dir();
    let r = ced(&[
        "--out",
        o,
        "--data",
        d.to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/m.ckpt",
        "eval",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/m.ckpt"));

    let r = ced(&["--config", "/nonexistent/run.toml", "eval"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nlearning_rat = 0.1\n").unwrap();
    let r = ced(&["--config", p.to_str().unwrap(), "synth"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rat"));
}

#[test]
fn sweep_and_ablate_formats() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = golden_config(out.path());
    cfg.data = Some(golden_dir());
    cfg.checkpoint = Some(golden_dir().join("model.ckpt"));
    cfg.train.epochs = 1;
    run_command(Command::Sweep, &cfg).unwrap();
    let csv = fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[1].starts_with("5,"));
    assert!(lines[10].starts_with("95,"));

    run_command(Command::Ablate, &cfg).unwrap();
    let table = fs::read_to_string(out.path().join("ablation.txt")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    let header: Vec<&str> = rows[0].split_whitespace().collect();
    assert_eq!(header, ["Method", "Acc", "Precision", "Recall", "F1", "ER"]);
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["CED", "O1", "O2"]);
}

#[test]
fn replay_prints_decisions() {
    let out = tempfile::tempdir().unwrap();
    let d = golden_dir();
    let ckpt = d.join("model.ckpt");
    let first_test: serde_json::Value = serde_json::from_str(
        fs::read_to_string(d.join("test.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    let id = first_test["id"].as_str().unwrap();
    let cfg_path = out.path().join("replay.toml");
    fs::write(&cfg_path, format!("stream = {id:?}\n")).unwrap();
    let r = ced(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--data",
        d.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--alpha",
        "0.8",
        "replay",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.starts_with(id));
    assert!(text.contains("p(rumor)="));
    assert!(text.contains("-> "));
}
