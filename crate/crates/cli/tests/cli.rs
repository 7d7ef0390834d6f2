use std::path::Path;
use std::process::{Command, Output};

use bashcomment_core::decoder::DecoderConfig;
use bashcomment_core::encoder::EncoderConfig;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bashcomment"));
    c.env_remove("BASHEXPLAINER_MODEL_DIR").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("stderr line")).unwrap()
}

fn write_tiny_config(dir: &Path) {
    let mut enc = EncoderConfig::desk();
    enc.hidden_size = 16;
    enc.num_layers = 1;
    enc.num_heads = 2;
    enc.feedforward_size = 32;
    let mut dec = DecoderConfig::desk();
    dec.hidden_size = 16;
    dec.num_layers = 1;
    dec.num_heads = 2;
    dec.feedforward_size = 32;
    dec.beam_size = 3;
    let cfg = serde_json::json!({
        "encoder": enc,
        "decoder": dec,
        "model_dir": "model",
        "train": { "epochs": 1, "batch_size": 16 },
    });
    std::fs::write(dir.join("config.json"), cfg.to_string()).unwrap();
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tiny_config(d);
    let c = ["--config", "config.json"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| ok(d, &with(rest).iter().map(String::as_str).collect::<Vec<_>>());

    call(&["synth", "--n", "80", "--out", "corpus.jsonl"]);
    let stats: Value = serde_json::from_str(&call(&["prepare", "--in", "corpus.jsonl", "--out", "data"])).unwrap();
    assert_eq!(stats["samples"], 80);
    for f in ["corpus.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl", "stats.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let count = |f: &str| std::fs::read_to_string(d.join("data").join(f)).unwrap().lines().count();
    assert_eq!((count("train.jsonl"), count("valid.jsonl"), count("test.jsonl")), (64, 8, 8));

    let r1: Value = serde_json::from_str(&call(&["train", "--stage", "stage1", "--data", "data"])).unwrap();
    assert_eq!(r1["stage"], "stage1");
    assert!(d.join("model/encoder.ckpt").exists());
    let r2: Value = serde_json::from_str(&call(&["train", "--stage", "stage2", "--data", "data"])).unwrap();
    assert_eq!(r2["index_rebuilds"], 1);
    for f in ["model.ckpt", "index.bin", "repository.jsonl", "code_vocab.json", "comment_vocab.json", "stage2_report.json"] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }

    let table = call(&["evaluate", "--data", "data"]);
    assert!(table.contains("BLEU-4") && table.contains("corpus-level"), "{table}");
    let scores: Value = serde_json::from_str(&call(&["evaluate", "--data", "data", "--json"])).unwrap();
    for k in ["bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l"] {
        let v = scores[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert!(d.join("model/evaluation.json").exists());

    let code = "find . -type f -name \"*.php\"";
    let g1 = call(&["generate", "--code", code]);
    let g2 = call(&["generate", "--code", code]);
    assert_eq!(g1, g2);
    let g: Value = serde_json::from_str(&g1).unwrap();
    assert!(!g["comment"].as_str().unwrap().is_empty());
    for k in ["similar_code", "similar_comment", "semantic_distance", "lexical_sim", "token_logprobs"] {
        assert!(g.get(k).is_some(), "missing {k}");
    }

    let r: Value = serde_json::from_str(&call(&["retrieve", "--code", code, "--k", "5"])).unwrap();
    let top = r["top_k"].as_array().unwrap();
    assert_eq!(top.len(), 5);
    let dists: Vec<f64> = top.iter().map(|t| t["semantic_distance"].as_f64().unwrap()).collect();
    assert!(dists.windows(2).all(|w| w[0] <= w[1]));

    let ablation = call(&["ablate", "--data", "data", "--beam-size", "1"]);
    let rows: Vec<&str> = ablation.lines().skip(1).filter(|l| !l.starts_with("scores")).collect();
    assert_eq!(rows.len(), 6, "{ablation}");
    assert!(rows[0].starts_with("full"));
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(d.join("model/ablation.json")).unwrap()).unwrap();
    assert_eq!(saved.as_array().unwrap().len(), 6);

    // The environment variable relocates the model directory.
    std::fs::rename(d.join("model"), d.join("moved")).unwrap();
    let out = bin().current_dir(d).args(["--config", "config.json", "generate", "--code", code]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .current_dir(d)
        .env("BASHEXPLAINER_MODEL_DIR", d.join("moved"))
        .args(["--config", "config.json", "generate", "--code", code])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), g1);
}

#[test]
fn single_stage_output_is_evaluable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_tiny_config(d);
    let c = ["--config", "config.json"];
    ok(d, &[&c[..], &["--seed", "3", "synth", "--n", "60", "--out", "c.jsonl"]].concat());
    ok(d, &[&c[..], &["prepare", "--in", "c.jsonl", "--out", "data"]].concat());
    let r: Value = serde_json::from_str(&ok(d, &[&c[..], &["train", "--stage", "single", "--data", "data", "--epochs", "2"]].concat())).unwrap();
    assert_eq!(r["index_rebuilds"], 2);
    ok(d, &[&c[..], &["evaluate", "--data", "data", "--json"]].concat());
}

#[test]
fn usage_errors_exit_1_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec![],
        vec!["bogus"],
        vec!["train", "--stage", "stage9", "--data", "d"],
        vec!["--profile", "huge", "serve"],
        vec!["train", "--stage", "stage2", "--data", "d", "--ablation", "nothing"],
    ] {
        let out = run(tmp.path(), &args);
        let err = last_stderr_json(&out);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {err}");
        assert_eq!(err["exit_code"], 1);
    }
    std::fs::write(tmp.path().join("bad.json"), r#"{"unknown_key": 1}"#).unwrap();
    let out = run(tmp.path(), &["--config", "bad.json", "generate", "--code", "ls"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_stderr_json(&out)["error"], "usage");
}

#[test]
fn runtime_errors_exit_2_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.jsonl"), "{\"code\": \"ls\"}\n").unwrap();
    let out = run(d, &["prepare", "--in", "bad.jsonl", "--out", "data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = last_stderr_json(&out);
    assert_eq!(err["error"], "malformed_record");
    assert!(!err["message"].as_str().unwrap().is_empty());

    let out = run(d, &["generate", "--code", "ls", "--model-dir", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(last_stderr_json(&out)["error"], "io");

    let out = run(d, &["--config", "missing.json", "generate", "--code", "ls"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["generate", "--code", "  "]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for cmd in ["prepare", "train", "evaluate", "generate", "ablate", "serve"] {
        assert!(help.contains(cmd), "{cmd}");
    }
}
