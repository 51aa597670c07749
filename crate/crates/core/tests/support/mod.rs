//! Drives the `cartlab` binary through a small end-to-end pipeline.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn cartlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cartlab"))
        .args(args)
        .env_remove("CARTRIDGE_LAB_DIR")
        .output()
        .expect("spawn cartlab")
}

/// Experiment config small enough that every scripted command finishes in
/// seconds.
pub fn tiny_experiment_json() -> serde_json::Value {
    serde_json::json!({
        "model": {
            "num_layers": 2, "num_heads": 2, "head_dim": 8, "model_dim": 16,
            "vocab_size": 256, "max_positions": 512, "rope_base": 10000.0
        },
        "pretrain": { "steps": 3, "batch_size": 2, "seq_len": 32, "learning_rate": 0.003, "corpora": 2, "num_entities": 4 },
        "task": { "name": "records", "num_entities": 5, "num_attributes": 3 },
        "task_b": { "name": "filings", "num_entities": 5, "num_attributes": 3 },
        "traces": { "count": 4, "eval_count": 2, "temperature": 0.7, "max_len": 6 },
        "init": { "p": 16, "chunk_size": 4, "sorted": false },
        "train": { "steps": 4, "batch_size": 2, "checkpoint_every": 2, "learning_rate": 0.01 },
        "eval_size": 10,
        "threshold": 1.5,
        "relative_threshold": true
    })
}

pub fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&tiny_experiment_json()).unwrap()).unwrap();
    path
}

pub fn read_manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("RUN_MANIFEST.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Runs every stochastic command (and the analyses downstream of them) under
/// `root`, returning each run's manifest `outputs` map by command label.
pub fn run_pipeline(root: &Path) -> BTreeMap<String, serde_json::Value> {
    std::fs::create_dir_all(root).unwrap();
    let cfg = write_config(root);
    let d = |name: &str| root.join(name);
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-corpus", vec!["gen-corpus".into(), "--task".into(), "records".into(), "--entities".into(), "5".into(),
            "--attributes".into(), "3".into(), "--seed".into(), "1".into()]),
        ("pretrain", vec!["pretrain".into(), "--config".into(), s(&cfg), "--seed".into(), "2".into()]),
        ("gen-traces", vec!["gen-traces".into(), "--model".into(), s(&d("pretrain/model.clab")), "--corpus".into(),
            s(&d("gen-corpus/corpus.bin")), "--count".into(), "4".into(), "--max-len".into(), "6".into(),
            "--seed".into(), "3".into()]),
        ("init-rvi", vec!["init".into(), "rvi".into(), "--model".into(), s(&d("pretrain/model.clab")), "--p".into(),
            "16".into(), "--seed".into(), "4".into()]),
        ("init-sci", vec!["init".into(), "sci".into(), "--model".into(), s(&d("pretrain/model.clab")), "--corpus".into(),
            s(&d("gen-corpus/corpus.bin")), "--p".into(), "16".into(), "--chunk".into(), "4".into(), "--seed".into(), "5".into()]),
        ("init-first-k", vec!["init".into(), "first-k".into(), "--model".into(), s(&d("pretrain/model.clab")),
            "--corpus".into(), s(&d("gen-corpus/corpus.bin")), "--p".into(), "16".into()]),
        ("train", vec!["train".into(), "--model".into(), s(&d("pretrain/model.clab")), "--corpus".into(),
            s(&d("gen-corpus/corpus.bin")), "--traces".into(), s(&d("gen-traces/traces.jsonl")), "--init".into(),
            s(&d("init-sci/cartridge.crtg")), "--eval-traces".into(), s(&d("gen-traces/traces.jsonl")),
            "--steps".into(), "4".into(), "--batch-size".into(), "2".into(), "--checkpoint-every".into(), "2".into(),
            "--seed".into(), "6".into()]),
        ("spectra", vec!["spectra".into(), "--cartridge".into(), s(&d("train/final.crtg"))]),
        ("rotations", vec!["rotations".into(), "--run".into(), s(&d("train"))]),
        ("similarity", vec!["similarity".into(), "--a".into(), s(&d("init-sci/cartridge.crtg")), "--b".into(),
            s(&d("train/final.crtg"))]),
        ("eval", vec!["eval".into(), "--model".into(), s(&d("pretrain/model.clab")), "--items".into(),
            s(&d("gen-corpus/eval.jsonl")), "--cartridge".into(), s(&d("train/final.crtg"))]),
        ("ablate", vec!["ablate".into(), "--config".into(), s(&cfg), "--seed".into(), "7".into()]),
        ("convergence", vec!["convergence".into(), "--config".into(), s(&cfg), "--seeds".into(), "3".into(),
            "--seed".into(), "8".into()]),
        ("ngram-sweep", vec!["ngram-sweep".into(), "--corpus".into(), s(&d("gen-corpus/corpus.bin")), "--p".into(),
            "16".into(), "--max-pow".into(), "3".into(), "--seeds".into(), "5".into(), "--seed".into(), "9".into()]),
    ];
    let mut outputs = BTreeMap::new();
    for (label, mut args) in steps {
        args.push("--out".into());
        args.push(s(&d(label)));
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = cartlab(&argv);
        assert!(
            out.status.success(),
            "{label} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.insert(label.to_string(), read_manifest(&d(label))["outputs"].clone());
    }
    outputs
}
