//! End-to-end checks of the `logan` binary: exit codes, file formats and resume.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    /// A small synthetic run that trains in well under a second per epoch.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = json!({
            "model": {
                "dims": { "vocab": 8, "word_embed": 6, "hidden": 10, "pe_dim": 4, "feature_dim": 16 },
                "iterations": 2
            },
            "loss": { "top_k_negatives": 3, "batch_videos": 6 },
            "train": { "lr": 0.003, "epochs": 3, "seed": 1 },
            "synth": { "train_videos": 12, "test_videos": 6 },
            "paths": {
                "data_dir": dir.path().join("data"),
                "checkpoint": dir.path().join("run/model.lgan"),
                "report": dir.path().join("run/report.json"),
                "log": dir.path().join("run/train.jsonl")
            }
        });
        std::fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.json");
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_logan"));
        cmd.arg(args[0]).arg("--config").arg(&cfg).args(&args[1..]);
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn log_lines(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_verify_writes_every_file_and_passes_the_oracle() {
    let sb = Sandbox::new();
    let out = sb.ok(&["synth", "--verify"]);
    assert!(out.contains("oracle check passed"), "{out}");
    for f in ["data/train.json", "data/test.json", "data/vocab.txt", "data/concepts.lgfv"] {
        assert!(sb.path(f).exists(), "{f}");
    }
    let m = json_file(&sb.path("data/test.json"));
    assert_eq!(m["queries"].as_array().unwrap().len(), 6);
    let first = std::fs::read_dir(sb.path("data/features")).unwrap().next().unwrap().unwrap();
    let feat = std::fs::read(first.path()).unwrap();
    assert_eq!(&feat[..4], b"LGFV");
}

#[test]
fn invalid_synth_spec_exits_2() {
    let sb = Sandbox::new();
    let bad = sb.path("bad.json");
    std::fs::write(&bad, r#"{"synth": {"concept_count": 0}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_logan")).args(["synth", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_exits_2() {
    let sb = Sandbox::new();
    let bad = sb.path("bad.json");
    std::fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_logan")).args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let sb = Sandbox::new();
    sb.ok(&["synth"]);
    assert_eq!(code(&sb.run(&["eval"])), 2);
}

#[test]
fn gradcheck_passes_and_injected_fault_exits_1() {
    let sb = Sandbox::new();
    let out = sb.ok(&["gradcheck"]);
    assert!(out.contains("all parameters within"), "{out}");
    assert_eq!(code(&sb.run(&["gradcheck", "--inject-fault"])), 1);
}

#[test]
fn oracle_eval_reaches_the_upper_bound() {
    let sb = Sandbox::new();
    sb.ok(&["synth"]);
    sb.ok(&["eval", "--oracle"]);
    let rep = json_file(&sb.path("run/report.json"));
    assert_eq!(rep["checkpoint_hash"], "oracle");
    for cell in rep["grid"].as_array().unwrap() {
        assert_eq!(cell["recall"], cell["upper_bound"], "{cell}");
    }
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let sb = Sandbox::new();
    sb.ok(&["synth"]);
    sb.ok(&["train", "--epochs", "0"]);
    let ckpt = std::fs::read(sb.path("run/model.lgan")).unwrap();
    assert_eq!(&ckpt[..4], b"LGAN");
    sb.ok(&["eval"]);
}

#[test]
fn training_lowers_the_loss_and_logs_every_step() {
    let sb = Sandbox::new();
    sb.ok(&["synth"]);
    sb.ok(&["train", "--epochs", "8"]);
    let log = log_lines(&sb.path("run/train.jsonl"));
    let epochs: Vec<f64> = log.iter().filter(|r| r["event"] == "epoch").map(|r| r["mean_loss"].as_f64().unwrap()).collect();
    assert_eq!(epochs.len(), 8);
    assert!(epochs[7] < epochs[0], "{epochs:?}");
    let steps = log.iter().filter(|r| r["event"] == "step").count();
    assert_eq!(steps, 8 * 2);
    for r in log.iter().filter(|r| r["event"] == "step") {
        for k in ["epoch", "step", "loss", "active_hinges", "lr", "wall_ms"] {
            assert!(!r[k].is_null(), "{k} missing from {r}");
        }
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let whole = Sandbox::new();
    whole.ok(&["synth"]);
    whole.ok(&["train", "--epochs", "4"]);
    let split = Sandbox::new();
    split.ok(&["synth"]);
    split.ok(&["train", "--epochs", "2"]);
    split.ok(&["train", "--epochs", "4", "--resume"]);
    assert_eq!(std::fs::read(whole.path("run/model.lgan")).unwrap(), std::fs::read(split.path("run/model.lgan")).unwrap());
    let losses = |sb: &Sandbox| -> Vec<Value> {
        log_lines(&sb.path("run/train.jsonl")).into_iter().filter(|r| r["event"] == "epoch").map(|r| r["mean_loss"].clone()).collect()
    };
    assert_eq!(losses(&whole), losses(&split));
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let a = Sandbox::new();
    a.ok(&["synth"]);
    a.ok(&["train"]);
    a.ok(&["eval"]);
    let b = Sandbox::new();
    b.ok(&["synth"]);
    b.ok(&["train", "--sequential"]);
    b.ok(&["eval", "--sequential"]);
    let (ra, rb) = (json_file(&a.path("run/report.json")), json_file(&b.path("run/report.json")));
    assert_eq!(ra["grid"], rb["grid"]);
    assert_eq!(ra["checkpoint_hash"], rb["checkpoint_hash"]);
}

#[test]
fn attention_dump_has_normalized_matrices() {
    let sb = Sandbox::new();
    sb.ok(&["synth"]);
    sb.ok(&["train", "--epochs", "1"]);
    let m = json_file(&sb.path("data/test.json"));
    let qid = m["queries"][0]["query_id"].as_str().unwrap().to_string();
    let out = sb.ok(&["attention", "--query-id", &qid]);
    let dump: Value = serde_json::from_str(&out).unwrap();
    let a = &dump["fbw"]["a_word"];
    let cols = a["shape"][1].as_u64().unwrap() as usize;
    for row in a["data"].as_array().unwrap().chunks(cols) {
        let s: f64 = row.iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert_eq!(dump["wcvg"].as_object().unwrap().len(), 2);
    assert_eq!(code(&sb.run(&["attention", "--query-id", "no_such_query"])), 2);
}
