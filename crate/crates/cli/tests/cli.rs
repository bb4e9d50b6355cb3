use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kcod::data_io::load_jsonl;
use kcod::model::EncoderModel;
use kcod::pipeline::RunConfig;

fn kcod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kcod"))
        .args(args)
        .output()
        .expect("spawn kcod")
}

fn ok(args: &[&str]) -> String {
    let out = kcod(args);
    assert!(
        out.status.success(),
        "kcod {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small but real: 4 classes, 2 of them OOD.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig {
        classes: 4,
        per_class: 30,
        dim: 8,
        signal_dims: Some(3),
        ood_ratio: 0.5,
        pretrain_epochs: 3,
        epochs: 3,
        batch: 16,
        dropout: 0.3,
        ..Default::default()
    };
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generate_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--out", p(&a), "--seed", "5"]);
    ok(&["generate", "--out", p(&b), "--seed", "5"]);
    assert_eq!(load_jsonl(&a.join("ind.jsonl")).unwrap().len(), 700);
    assert_eq!(load_jsonl(&a.join("ood.jsonl")).unwrap().len(), 300);
    for f in ["ind.jsonl", "ood.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    assert_eq!(kcod(&["generate", "--out", out, "--ood-ratio", "1.0"]).status.code(), Some(2));
    assert_eq!(kcod(&["generate", "--out", out, "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(kcod(&["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"seed": 1, "temperature": 0.5}"#).unwrap();
    assert_eq!(kcod(&["generate", "--out", out, "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn pretrain_zero_epochs_keeps_init_and_default_run_fits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--out", p(d)]);
    let zero = d.join("zero");
    ok(&["pretrain", "--ind", p(&d.join("ind.jsonl")), "--out", p(&zero), "--epochs", "0"]);
    let loaded = EncoderModel::load(&zero.join("pretrain.ckpt.json")).unwrap();
    let cfg = RunConfig::default();
    let init = EncoderModel::new(cfg.model_dims(16, 7), cfg.dropout, cfg.seed).unwrap();
    assert_eq!(loaded.params(), init.params());

    let full = d.join("full");
    ok(&["pretrain", "--ind", p(&d.join("ind.jsonl")), "--out", p(&full)]);
    let csv = fs::read_to_string(full.join("pretrain_loss.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let ce: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(ce < 0.05, "final CE {ce}");
}

#[test]
fn cluster_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    ok(&["generate", "--out", p(d), "--config", p(&cfg)]);
    ok(&["pretrain", "--ind", p(&d.join("ind.jsonl")), "--out", p(d), "--config", p(&cfg)]);
    let ckpt = d.join("pretrain.ckpt.json");
    let ood = d.join("ood.jsonl");
    ok(&["cluster", "--ood", p(&ood), "--checkpoint", p(&ckpt), "--out", p(d), "--config", p(&cfg), "--epochs", "4"]);
    let sc = fs::read_to_string(d.join("sc_curve.csv")).unwrap();
    assert_eq!(sc.lines().count(), 1 + 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("cluster.json")).unwrap()).unwrap();
    assert_eq!(summary["clusters"], 2);

    let est = d.join("est");
    ok(&["cluster", "--ood", p(&ood), "--checkpoint", p(&ckpt), "--out", p(&est), "--config", p(&cfg), "--estimate-c"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(est.join("cluster.json")).unwrap()).unwrap();
    assert_eq!(summary["estimated_from"], 4);

    let stdout = ok(&["evaluate", "--pred", p(&ood), "--ood", p(&ood), "--out", p(&d.join("self"))]);
    assert!(stdout.starts_with("acc 1.0000 ari 1.0000 nmi 1.0000"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("self/report.json")).unwrap()).unwrap();
    for key in ["intra_dist", "inter_dist", "per_class_compactness", "confusion"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    ok(&["evaluate", "--pred", p(&d.join("assignments.jsonl")), "--ood", p(&ood), "--checkpoint", p(&d.join("cluster.ckpt.json")), "--out", p(d)]);
    let text = fs::read_to_string(d.join("assignments.jsonl")).unwrap();
    let first_id: String = serde_json::from_str::<serde_json::Value>(text.lines().next().unwrap()).unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string();
    let partial = d.join("partial.jsonl");
    fs::write(&partial, text.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    let out = kcod(&["evaluate", "--pred", p(&partial), "--ood", p(&ood), "--out", p(d)]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("missing id {first_id}")), "{stderr}");
}

#[test]
fn pipeline_and_sweep_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let (a, b) = (d.join("a"), d.join("b"));
    ok(&["pipeline", "--out", p(&a), "--config", p(&cfg), "--seed", "3"]);
    ok(&["pipeline", "--out", p(&b), "--config", p(&cfg), "--seed", "3"]);
    for f in ["report.json", "assignments.jsonl", "cluster.ckpt.json", "run.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let sweep = |out: &Path, threads: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_kcod"))
            .args(["pipeline", "--out", p(out), "--config", p(&cfg), "--sweep", "--epochs", "2", "--pretrain-epochs", "2"])
            .env("KCOD_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
        fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let one = sweep(&d.join("s1"), "1");
    let four = sweep(&d.join("s4"), "4");
    assert_eq!(one, four);
    let lines: Vec<&str> = one.lines().collect();
    assert_eq!(lines[0], "param,value,k_kcl,threshold,k_neg,acc,ari,nmi,sc");
    assert_eq!(lines.len(), 1 + 15);
    assert!(d.join("s1/sweep/threshold-0.9/report.json").is_file());

    let bad = Command::new(env!("CARGO_BIN_EXE_kcod"))
        .args(["pipeline", "--out", p(&d.join("s0")), "--config", p(&cfg), "--sweep", "--epochs", "1"])
        .env("KCOD_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}
