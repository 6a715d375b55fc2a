use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mbscore"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mbscore")
}

fn preset(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// OU preset shrunk to a few seconds of work.
fn tiny_ou(dir: &Path) -> PathBuf {
    let mut v = preset("ou_gaussian.json");
    v["grid"]["n_steps"] = 50.into();
    v["simulate"]["n_paths"] = 300.into();
    v["training"]["epochs"] = 4.into();
    v["training"]["hidden_width"] = 8.into();
    v["training"]["hidden_layers"] = 2.into();
    v["training"]["examples_per_epoch"] = 2000.into();
    v["sampler"]["steps"] = 50.into();
    v["sampler"]["n_samples"] = 300.into();
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn help_and_usage_exit_codes() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["simulate", "train", "sample", "score-check", "nonlinear-score", "verify", "metrics", "--threads", "--seed", "--out"] {
        assert!(text.contains(word), "help lacks {word}");
    }
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["verify", "nonsense"]).status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = preset("ou_gaussian.json");
    v["training"]["epocs"] = 3.into();
    let p = dir.path().join("typo.json");
    std::fs::write(&p, v.to_string()).unwrap();
    let out = run(&["--config", s(&p), "--out", s(dir.path()), "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epocs"));
}

#[test]
fn bundled_presets_parse() {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")).unwrap() {
        let p = entry.unwrap().path();
        let out = run(&["--config", s(&p), "--out", s(dir.path()), "score-check", "--schedule", "vp"]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", p.display(), String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn score_check_agrees_with_fokker_planck() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--out", s(dir.path()), "score-check", "--x0", "-1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = lines(&dir.path().join("score_check.csv"));
    assert_eq!(rows[0], "schedule,t,y,score_mb,score_fp,abs_err,rel_err");
    assert!(rows.len() > 100);
    for r in &rows[1..] {
        let rel: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!(rel <= 1e-6, "{r}");
    }
    let q = run(&["--out", s(dir.path()), "score-check", "--quadrature-steps", "10000", "--schedule", "subvp"]);
    assert_eq!(q.status.code(), Some(0), "{}", String::from_utf8_lossy(&q.stderr));
}

#[test]
fn simulate_writes_gamma_rows_and_stable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ou(dir.path());
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let out = run(&["--config", s(&cfg), "--out", s(dir.path()), "--threads", "1", "simulate"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest_simulate.json")).unwrap()).unwrap();
        hashes.push(m["config_sha256"].as_str().unwrap().to_owned());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(lines(&dir.path().join("gamma.csv")).len(), 1 + 51);
    let paths = lines(&dir.path().join("paths.csv"));
    assert!(paths[0].starts_with("path,step,t,x_0"));
    assert_eq!(paths.len(), 1 + 16 * 51);
}

#[test]
fn train_resume_sample_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ou(dir.path());
    let base = ["--config", s(&cfg), "--out", s(dir.path())];

    let out = bin().args(base).arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&dir.path().join("loss_curve.csv")).len(), 1 + 4);

    let ckpt = dir.path().join("model.bin");
    let out = bin().args(base).args(["train", "--resume", s(&ckpt), "--epochs", "6"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&dir.path().join("loss_curve.csv")).len(), 1 + 6);

    let out = bin().args(base).args(["sample", "--field", "mlp", "--n", "250"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&dir.path().join("samples.csv")).len(), 1 + 250);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["mmd_prior_baseline"].as_f64().unwrap() >= 0.0, "{report}");

    let samples = dir.path().join("samples.csv");
    let out = bin().args(base).args(["metrics", "--samples", s(&samples)]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ou(dir.path());
    let out = run(&["--config", s(&cfg), "--out", s(dir.path()), "sample", "--field", "mlp"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ou(dir.path());
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["training"]["learning_rate"] = 1e300.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = run(&["--config", s(&cfg), "--out", s(dir.path()), "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_sampling_is_reproducible_with_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ou(dir.path());
    let mut runs = Vec::new();
    for i in 0..2 {
        let out_dir = dir.path().join(format!("run{i}"));
        let out = run(&["--config", s(&cfg), "--out", s(&out_dir), "--threads", "1", "sample", "--field", "oracle"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        runs.push(std::fs::read(out_dir.join("samples.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn covering_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--out", s(dir.path()), "verify", "covering"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = lines(&dir.path().join("verify_covering.csv"));
    assert_eq!(rows[0], "suite,check,value,criterion,pass");
    assert!(rows[1..].iter().all(|r| r.ends_with(",true")));
}
