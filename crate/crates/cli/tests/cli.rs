use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use valm_core::model::{ModelConfig, ModelState};

const SMALL: &str = "\
sentences = 3000
encoder_dim = 32
d_model = 32
heads = 2
max_seq = 32
seq_len = 32
steps = 400
warmup = 40
lr = 0.003
centroids = 16
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.kv"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn valm(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_valm"))
            .current_dir(self.dir.path())
            .args(args)
            .args(["--config", "run.kv"])
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.valm(args);
        assert!(
            out.status.success(),
            "valm {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepare(&self) {
        self.ok(&["gen-corpus"]);
        self.ok(&["build-index"]);
        self.ok(&["build-cache"]);
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path(rel)).unwrap()
    }

    fn json(&self, rel: &str) -> serde_json::Value {
        serde_json::from_slice(&self.read(rel)).unwrap()
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn retrieval_ablation_contrast() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["train"]);
    ws.ok(&["eval", "--mode", "retrieve", "--set", "report=out/retrieve"]);
    ws.ok(&["eval", "--mode", "disabled", "--set", "report=out/disabled"]);
    let retrieve = ws.json("out/retrieve.json")["mean_accuracy"].as_f64().unwrap();
    let disabled = ws.json("out/disabled.json")["mean_accuracy"].as_f64().unwrap();
    assert!(retrieve - disabled >= 0.3, "retrieve {retrieve}, disabled {disabled}");

    let report = ws.json("out/retrieve.json");
    assert_eq!(report["config"]["mode"], "retrieve");
    assert_eq!(report["config"]["config_sha256"].as_str().unwrap().len(), 64);
    let csv = String::from_utf8(ws.read("out/retrieve.csv")).unwrap();
    assert!(csv.starts_with("prompt,item,predicted,gold,correct\n"));
    let loss = String::from_utf8(ws.read("out/loss.csv")).unwrap();
    assert!(loss.starts_with("step,lr,nll\n"));
    assert_eq!(loss.lines().count(), 401);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["train", "--steps", "0", "--seed", "13"]);
    let vocab = std::fs::read_to_string(ws.path("data/vocab.txt")).unwrap().lines().count();
    let cfg = ModelConfig {
        num_images: 4,
        ..ModelConfig::new(2, 2, 32, vocab, 32)
    };
    let init = ModelState::new(cfg, 13).unwrap();
    assert_eq!(ws.read("out/model.ckpt"), init.to_checkpoint_bytes());
    assert_eq!(
        String::from_utf8(ws.read("out/loss.csv")).unwrap(),
        "step,lr,nll\n"
    );
}

#[test]
fn missing_index_is_a_config_error_and_writes_nothing() {
    let ws = Workspace::new();
    ws.ok(&["gen-corpus"]);
    let before = files_under(ws.dir.path());
    for cmd in ["build-cache", "train", "eval"] {
        let out = ws.valm(&[cmd, "--set", "index=missing.index", "--set", "checkpoint=data/vocab.txt"]);
        assert_eq!(out.status.code(), Some(2), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing.index"));
    }
    assert_eq!(files_under(ws.dir.path()), before);
}

#[test]
fn reruns_reproduce_artifacts() {
    let ws = Workspace::new();
    ws.prepare();
    ws.ok(&["train", "--steps", "20"]);
    let names = ["data/keys.emb", "data/kb.index", "data/train.cache", "out/model.ckpt", "out/loss.csv"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| ws.read(n)).collect();
    ws.prepare();
    ws.ok(&["train", "--steps", "20"]);
    for (n, bytes) in names.iter().zip(&first) {
        assert_eq!(&ws.read(n), bytes, "{n} changed between runs");
    }
}

#[test]
fn flags_override_file_override_defaults() {
    let ws = Workspace::new();
    let text = ws.ok(&["show-config", "--k", "2", "--set", "lr=0.5"]);
    let get = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap()
            .to_string()
    };
    assert_eq!(get("k"), "2");
    assert_eq!(get("lr"), "0.5");
    assert_eq!(get("d_model"), "32");
    assert_eq!(get("nprobe"), "8");
    let schema = ws.ok(&["show-config", "--schema"]);
    assert!(schema.contains("| `nprobe` | `8` |"));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let ws = Workspace::new();
    ws.prepare();
    let bad_mode = ws.valm(&["build-cache", "--mode", "sideways"]);
    assert_eq!(bad_mode.status.code(), Some(2));
    let unknown = ws.valm(&["train", "--set", "learning_rate=1"]);
    assert_eq!(unknown.status.code(), Some(2));

    std::fs::create_dir_all(ws.path("out")).unwrap();
    std::fs::write(ws.path("out/model.ckpt"), b"VALMCKPT garbage").unwrap();
    let corrupt = ws.valm(&["eval"]);
    assert_eq!(corrupt.status.code(), Some(4));

    // A cache built for another k no longer matches the plan.
    let mismatch = ws.valm(&["train", "--k", "2", "--steps", "1"]);
    assert_eq!(mismatch.status.code(), Some(4));

    std::fs::write(ws.path("data/items.jsonl"), "{\"ITEM\": \"obj00\"}\n").unwrap();
    ws.ok(&["train", "--steps", "1"]);
    let bad_items = ws.valm(&["eval"]);
    assert_eq!(bad_items.status.code(), Some(6));
}
