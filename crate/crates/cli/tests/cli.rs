use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn genref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genref")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = genref(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{
  "data": {"n": 48, "k": 3, "fractions": [0.5, 0.25, 0.25]},
  "model": {"hidden": 8, "attention": 4, "embed": 8, "region_dim": 8, "text_dim": 8, "fused_dim": 4, "dropout": 0.0},
  "train": {"epochs": 1, "batch_size": 8},
  "study": {"playlist_len": 6}
}"#;

#[test]
fn usage_errors_exit_two() {
    assert_eq!(genref(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(genref(&["data", "gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(genref(&["train", "--refine", "3"]).status.code(), Some(2));
    assert_eq!(genref(&[]).status.code(), Some(2));
}

#[test]
fn data_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["data", "gen", "--seed", "7", "--n", "100", "--out", out.to_str().unwrap()]);
    }
    let da = std::fs::read(a.join("dataset.jsonl")).unwrap();
    assert_eq!(da, std::fs::read(b.join("dataset.jsonl")).unwrap());
    assert_eq!(da.iter().filter(|&&c| c == b'\n').count(), 101);
    let m = read_json(&a.join("data-gen.manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["config"]["data"]["n"], 100);
}

#[test]
fn eval_of_identical_corpora_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.txt");
    std::fs::write(&refs, "the red cube is big\nit is at row two column three\nthey are both in row one\n").unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["eval", "--hyps", refs.to_str().unwrap(), "--refs", refs.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("rouge_l"));
    let report = read_json(&out.join("metrics.json"));
    assert_eq!(report["rouge_l"]["mean"], 1.0);
    assert!(out.join("eval.manifest.json").exists());
}

#[test]
fn gradcheck_tiny_passes_and_requires_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let stdout = ok(&["gradcheck", "--tiny", "--out", out]);
    assert!(stdout.starts_with("max relative error"), "{stdout}");
    let report = read_json(&dir.path().join("gradcheck.json"));
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
    let bad = genref(&["gradcheck", "--out", out]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--tiny"));
}

#[test]
fn train_generate_dump_and_serve_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["data", "gen", "--config", cfg_s, "--out", out_s, "--seed", "3"]);
    let data = out.join("dataset.jsonl");
    let data_s = data.to_str().unwrap();
    let stdout = ok(&["train", "--config", cfg_s, "--out", out_s, "--seed", "3", "--data", data_s, "--epochs", "2"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2);
    let model = out.join("model.grck");
    assert!(model.exists() && out.join("model.vocab.json").exists());
    let manifest = read_json(&out.join("train.manifest.json"));
    assert_eq!(manifest["config"]["train"]["epochs"], 2);
    assert_eq!(manifest["config"]["model"]["hidden"], 8);

    let model_s = model.to_str().unwrap();
    ok(&["generate", "--config", cfg_s, "--out", out_s, "--seed", "3", "--model", model_s, "--data", data_s, "--split", "val"]);
    let pool = read_json(&out.join("pool.json"));
    assert_eq!(pool["generated"].as_array().unwrap().len(), 12);
    assert_eq!(pool["ground_truth"].as_array().unwrap().len(), 12);
    let lines = std::fs::read_to_string(out.join("generations.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);

    ok(&["attn-dump", "--config", cfg_s, "--out", out_s, "--seed", "3", "--model", model_s, "--data", data_s, "--index", "2"]);
    let dump = read_json(&out.join("attention.json"));
    let blocks = dump["blocks"].as_array().unwrap();
    assert_eq!(blocks.len(), 4);
    let weights = blocks[0]["weights"].as_array().unwrap();
    assert_eq!(weights.len(), blocks[0]["tokens"].as_array().unwrap().len());
    let total: f64 = weights[0].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(dump["regions"].as_array().unwrap().len(), 3);

    let missing = genref(&["serve-ratings", "--out", out_s, "--pool", "/nonexistent/pool.json"]);
    assert_eq!(missing.status.code(), Some(1));
    let small = genref(&["serve-ratings", "--out", out_s, "--pool", out.join("pool.json").to_str().unwrap()]);
    assert_eq!(small.status.code(), Some(1), "a 50-task playlist cannot be drawn from 12 items");
}

#[test]
fn ablate_emits_the_nine_cell_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("abl");
    let stdout = ok(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("refine 1 vs 0"));
    let rows = read_json(&out.join("ablation.json"));
    assert_eq!(rows.as_array().unwrap().len(), 9);
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.lines().next().unwrap().starts_with("refine"));
}
