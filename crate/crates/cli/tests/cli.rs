//! End-to-end runs of the `graphrta` binary on a tiny generated pair.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn graphrta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphrta"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SPEC: &str = r#"{"source_nodes":60,"target_nodes":60,"class_count":4,"known_count":2,"feature_dim":6,
"p_intra":0.12,"p_inter":0.02,"mean_scale":1.0,"noise":1.0,"shift":{"mean_rotation":0.3,"mean_shift":0.3}}"#;

fn generate(dir: &Path) {
    fs::write(dir.join("spec.json"), SPEC).unwrap();
    let out = graphrta(&[
        "generate",
        "--spec",
        dir.join("spec.json").to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, out: &str) -> String {
    let cfg = serde_json::json!({
        "dataset_src": dir.join("data/source"),
        "dataset_tgt": dir.join("data/target"),
        "known_count": 2,
        "seeds": [0, 1],
        "workers": 2,
        "out": dir.join(out),
        "train": {"epochs": 6, "hidden": [8], "embedding_dim": 6, "disc_hidden": 5, "budget_ratio": 0.1},
        "ablate": {"rho": [0.0, 0.5], "variant": ["full", "no_adapt", {"threshold": 0.5}]}
    });
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(a.path());
    generate(b.path());
    for f in ["source/edges.txt", "source/features.txt", "source/labels.txt", "target/labels.txt"] {
        assert_eq!(fs::read(a.path().join("data").join(f)).unwrap(), fs::read(b.path().join("data").join(f)).unwrap(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["content_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn train_writes_artifacts_and_evaluate_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let cfg = write_config(dir, "run");
    let out = graphrta(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for seed in ["seed-0", "seed-1"] {
        for f in ["metrics.jsonl", "report.json", "edits.log", "checkpoint.bin", "embeddings.txt"] {
            assert!(dir.join("run").join(seed).join(f).is_file(), "{seed}/{f}");
        }
    }
    let metrics = fs::read_to_string(dir.join("run/seed-0/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let summary = fs::read_to_string(dir.join("run/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[3].starts_with("mean,") && rows[4].starts_with("std,"));

    let ckpt = dir.join("run/seed-1/checkpoint.bin");
    let eval_out = dir.join("eval.json");
    let out = graphrta(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        &cfg,
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(&eval_out).unwrap(),
        fs::read_to_string(dir.join("run/seed-1/report.json")).unwrap()
    );
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(printed["h_score"].is_number());

    let out = graphrta(&["inspect", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("zero fraction"));
    let out = graphrta(&["inspect", dir.join("run/seed-1/edits.log").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("edit log"));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let cfg = write_config(dir, "run");
    for out in ["a", "b"] {
        let path = dir.join(out);
        let res = graphrta(&["train", "--config", &cfg, "--seed", "3", "--out", path.to_str().unwrap()]);
        assert_eq!(code(&res), 0);
    }
    for f in ["metrics.jsonl", "edits.log", "checkpoint.bin", "report.json"] {
        assert_eq!(fs::read(dir.join("a/seed-3").join(f)).unwrap(), fs::read(dir.join("b/seed-3").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablate_writes_one_row_per_arm() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let cfg = write_config(dir, "abl");
    let out = graphrta(&["ablate", "--config", &cfg, "--axis", "variant", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.join("abl/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "variant,mean_h,std_h,mean_acc,std_acc");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("threshold:0.5,"));
    assert!(dir.join("abl/variant-no_adapt/seed-0/report.json").is_file());
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    assert_eq!(code(&graphrta(&["--help"])), 0);
    assert_eq!(code(&graphrta(&["--version"])), 0);
    assert_eq!(code(&graphrta(&["no-such-command"])), 1);
    assert_eq!(code(&graphrta(&["train"])), 1);

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"rho": 1.5}, "unknown_key": 1}"#).unwrap();
    assert_eq!(code(&graphrta(&["train", "--config", bad.to_str().unwrap()])), 1);

    let out = graphrta(&["evaluate", "--checkpoint", "/nonexistent/ckpt.bin", "--dataset-tgt", "/nonexistent"]);
    assert_eq!(code(&out), 2);
    let out = graphrta(&["inspect", "/nonexistent/ckpt.bin"]);
    assert_eq!(code(&out), 2);
}
