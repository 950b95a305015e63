//! Drives the `vffn` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
d_model = 16
d_hidden = 32
n_layers = 1
n_heads = 2
max_seq = 16
n_experts = 4
top_k = 2
d_expert = 8
max_loops = 3
steps = 30
batch = 2
seq = 16
peak_lr = 3e-3
synth_bytes = 6000
eval_batch = 4
eval_max_windows = 8
"#;

fn vffn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vffn")).args(args).output().unwrap()
}

/// `TINY` with at most one key overridden by `extra`.
fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    let key = extra.split('=').next().unwrap_or_default().trim();
    let base: Vec<&str> = TINY
        .lines()
        .filter(|l| key.is_empty() || l.split('=').next().unwrap_or_default().trim() != key)
        .collect();
    let text = format!("{}\n{extra}\nout_dir = {:?}\n", base.join("\n"), out.to_str().unwrap());
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_line(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim_end()).unwrap()
}

#[test]
fn gen_data_is_deterministic_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let o = vffn(&["gen-data", "--seed", "9", "--bytes", "20000", "--out", p.to_str().unwrap()]);
        let summary = stdout_json(&o);
        assert!(summary["easy_accuracy"].as_f64().unwrap() >= 0.9);
        assert!(summary["hard_accuracy"].as_f64().unwrap() <= 0.4);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let labels = fs::read(dir.path().join("a.txt.labels")).unwrap();
    assert_eq!(labels.len(), fs::read(&a).unwrap().len());
}

#[test]
fn account_prints_all_variants() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/budget_354m.toml");
    let o = vffn(&["account", "--config", cfg, "--format", "csv"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let variants: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["Base", "MoE", "2-Loop", "4-Loop", "6-Loop", "VersatileFFN (4 loops)"]);
    assert!(text.contains("Base,354.71,377.48"));

    let desk = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");
    let o = vffn(&["account", "--config", desk, "--format", "json"]);
    let rows = stdout_json(&o);
    assert_eq!(rows.as_array().unwrap().len(), 6);
}

#[test]
fn error_statuses_are_distinct() {
    let dir = tempfile::tempdir().unwrap();

    let cfg = write_config(dir.path(), "top_k = 5");
    let o = vffn(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!((e["error"].as_str(), e["field"].as_str()), (Some("config"), Some("top_k")));

    let cfg = write_config(dir.path(), "corpus = \"/nonexistent/corpus.txt\"");
    let o = vffn(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["error"], "data");

    let cfg = write_config(dir.path(), "peak_lr = 1e300");
    let o = vffn(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(4));
    let e = error_line(&o);
    assert!(e["snapshot"]["step"].as_u64().is_some());
    assert!(dir.path().join("out/nonfinite.ckpt").exists());

    let cfg = write_config(dir.path(), "");
    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"VFFNCKPT garbage").unwrap();
    let o = vffn(&["eval", "--config", &cfg, "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(error_line(&o)["error"], "checkpoint");

    let o = vffn(&["chart", "--metrics", "/nonexistent.jsonl", "--out", "/tmp/x.svg"]);
    assert_eq!(o.status.code(), Some(6));

    let o = vffn(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(64));
    assert_eq!(error_line(&o)["error"], "usage");
}

#[test]
fn train_eval_chart_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    // Untrained model: near-uniform logits give a loss close to ln(vocab).
    let untrained = stdout_json(&vffn(&["eval", "--config", &cfg]));
    let loss = untrained["loss"].as_f64().unwrap();
    assert!((loss - 258f64.ln()).abs() < 0.05, "{loss}");

    let summary = stdout_json(&vffn(&["train", "--config", &cfg]));
    assert_eq!(summary["steps"], 30);
    let out = dir.path().join("out");
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..30).collect::<Vec<_>>());

    let ckpt = out.join("final.ckpt");
    let report_path = dir.path().join("report.json");
    let args = ["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()];
    let a = vffn(&args);
    let b = vffn(&args);
    assert_eq!(a.stdout, b.stdout);
    let report = stdout_json(&a);
    assert!(report["loss"].as_f64().unwrap() < loss);
    assert_eq!(report["applications_match"], true);

    let mut with_out = args.to_vec();
    with_out.extend(["--out", report_path.to_str().unwrap()]);
    assert!(vffn(&with_out).status.success());

    let svg = dir.path().join("chart.svg");
    let o = vffn(&[
        "chart",
        "--metrics",
        out.join("metrics.jsonl").to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(fs::read_to_string(&svg).unwrap().contains("mean loops per layer"));

    let o = vffn(&["account", "--config", &cfg, "--report", report_path.to_str().unwrap()]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("VersatileFFN"));
}
