use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchfm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, train: &str) -> PathBuf {
    let path = dir.join("tiny.json");
    let text = format!(
        r#"{{
  "model": {{"T": 64, "L": 16, "n_layer": 1, "d": 16, "head_dim": 8, "ffn_mult": 2, "K": 9}},
  "train": {train},
  "data": {{"sources": [
    {{"kind": "kernelsynth", "num": 12, "length": 160, "seed": 1}},
    {{"kind": "sine", "num": 12, "length": 160, "seed": 2}}
  ]}},
  "eval": {{"dataset": {{"kind": "sine", "num": 4, "length": 160, "seed": 9}}, "seasonality": 24, "horizon": 16}}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

const TRAIN_12: &str = r#"{"total_steps": 12, "batch_size": 4, "peak_lr": 0.001, "n_cpm": 1, "checkpoint_every": 4}"#;

fn trained(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir, TRAIN_12);
    let out = dir.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&out), "--seed", "3"]);
    out
}

fn sines(dir: &Path, n: usize, length: usize) -> PathBuf {
    let path = dir.join(format!("sine-{n}-{length}.jsonl"));
    ok(&["generate", "sine", "--num", &n.to_string(), "--length", &length.to_string(), "--seed", "5", "--out", p(&path)]);
    path
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_writes_checkpoints_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path());
    for f in ["step_000004.ptfm", "step_000008.ptfm", "final.ptfm", "config.json", "metrics.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = jsonl(&out.join("metrics.jsonl"));
    assert_eq!(metrics.len(), 12);
    assert_eq!(metrics[11]["step"], 12);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["seed"], 3);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path());
    let cfg = dir.path().join("tiny.json");
    let resumed = dir.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let ck = out.join("step_000004.ptfm");
    ok(&["train", "--config", p(&cfg), "--out", p(&resumed), "--seed", "3", "--resume", p(&ck)]);
    assert_eq!(
        fs::read(out.join("final.ptfm")).unwrap(),
        fs::read(resumed.join("final.ptfm")).unwrap()
    );
    let tail: Vec<Value> = jsonl(&out.join("metrics.jsonl")).split_off(4);
    assert_eq!(jsonl(&resumed.join("metrics.jsonl")), tail);

    // A different training section is refused.
    let bad = run(&["train", "--config", p(&cfg), "--out", p(&resumed), "--seed", "4", "--resume", p(&ck)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn generate_is_deterministic_and_handles_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for path in [&a, &b] {
        ok(&["generate", "kernelsynth", "--num", "3", "--length", "50", "--seed", "7", "--out", p(path)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let rows = jsonl(&a);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["values"].as_array().unwrap().len(), 50);

    let empty = dir.path().join("empty.jsonl");
    ok(&["generate", "sine", "--num", "0", "--length", "50", "--out", p(&empty)]);
    assert_eq!(fs::read_to_string(&empty).unwrap(), "");
}

#[test]
fn tsmixup_needs_a_pool_and_respects_exclusions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mix.jsonl");
    let r = run(&["generate", "tsmixup", "--num", "2", "--length", "40", "--out", p(&out)]);
    assert_eq!(code(&r), 2);

    let pool = sines(dir.path(), 6, 80);
    let exclude = dir.path().join("exclude.txt");
    fs::write(&exclude, "sine-0\nsine-1\n").unwrap();
    let stdout = ok(&[
        "generate", "tsmixup", "--num", "8", "--length", "40", "--pool", p(&pool), "--exclude", p(&exclude), "--out", p(&out),
    ]);
    assert!(stdout.contains("overlap with 2 excluded ids: 0"), "{stdout}");
    for row in jsonl(&out) {
        for src in row["provenance"].as_array().unwrap() {
            assert!(src != "sine-0" && src != "sine-1", "{src}");
        }
    }
}

#[test]
fn forecast_emits_one_row_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = trained(dir.path());
    let ck = run_dir.join("final.ptfm");
    let input = sines(dir.path(), 3, 100);
    let out = dir.path().join("fc.jsonl");
    ok(&["forecast", "--ckpt", p(&ck), "--input", p(&input), "--horizon", "24", "--out", p(&out)]);
    let rows = jsonl(&out);
    assert_eq!(rows.len(), 3);
    let values = rows[0]["values"].as_array().unwrap();
    assert_eq!(values.len(), 9);
    assert!(values.iter().all(|r| r.as_array().unwrap().len() == 24));
    // Sorted by default: levels never cross.
    for t in 0..24 {
        let col: Vec<f64> = values.iter().map(|r| r[t].as_f64().unwrap()).collect();
        assert!(col.windows(2).all(|w| w[0] <= w[1]), "{col:?}");
    }
    assert_eq!(rows[0]["offset"], 100);

    ok(&["forecast", "--ckpt", p(&ck), "--input", p(&input), "--horizon", "8", "--levels", "0.1,0.5,0.9", "--out", p(&out)]);
    let rows = jsonl(&out);
    assert_eq!(rows[0]["levels"], serde_json::json!([0.1, 0.5, 0.9]));
    assert_eq!(rows[0]["values"].as_array().unwrap().len(), 3);

    let r = run(&["forecast", "--ckpt", p(&ck), "--input", p(&input), "--horizon", "49", "--out", p(&out)]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("1..=48"));

    let r = run(&["forecast", "--ckpt", p(&ck), "--input", p(&input), "--horizon", "8", "--levels", "0.33", "--out", p(&out)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn evaluate_report_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = trained(dir.path());
    let ck = run_dir.join("final.ptfm");
    let data = sines(dir.path(), 4, 200);
    let report = dir.path().join("report.json");
    let stdout = ok(&[
        "evaluate", "--ckpt", p(&ck), "--dataset", p(&data), "--seasonality", "24", "--horizon", "16", "--windows", "3",
        "--seed", "1", "--report", p(&report),
    ]);
    assert!(stdout.contains("seasonal_naive"), "{stdout}");
    let doc: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(patchfm::eval::REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(doc["seed"], 1);
    assert_eq!(doc["aggregates"]["seasonal_naive"]["crps"], 1.0);
    let methods = doc["aggregates"].as_object().unwrap();
    assert_eq!(methods.len(), 3);

    let r = run(&[
        "evaluate", "--ckpt", p(&ck), "--dataset", p(&data), "--seasonality", "24", "--horizon", "16", "--mase-variant",
        "bogus", "--report", p(&report),
    ]);
    assert_eq!(code(&r), 2);
}

#[test]
fn ablate_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#"{"total_steps": 4, "batch_size": 2, "peak_lr": 0.001, "n_cpm": 1}"#);
    let out = dir.path().join("abl");
    ok(&["ablate", "--config", p(&cfg), "--axis", "n-cpm", "--values", "1,2", "--out", p(&out)]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let variants = doc["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 2);
    let hashes: Vec<&str> = variants.iter().map(|v| v["config_hash"].as_str().unwrap()).collect();
    assert_ne!(hashes[0], hashes[1]);
    assert!(variants.iter().all(|v| v["param_count"].as_u64().unwrap() > 0));
    let aggregates = doc["aggregates"].as_object().unwrap();
    assert!(aggregates.contains_key("n_cpm=1") && aggregates.contains_key("n_cpm=2"), "{aggregates:?}");

    let width = dir.path().join("width");
    ok(&["ablate", "--config", p(&cfg), "--axis", "width", "--values", "16,24", "--out", p(&width)]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(width.join("report.json")).unwrap()).unwrap();
    let counts: Vec<u64> = doc["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["param_count"].as_u64().unwrap())
        .collect();
    assert!(counts[1] > counts[0], "{counts:?}");
}

#[test]
fn plot_writes_well_formed_svg() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = trained(dir.path());
    let input = sines(dir.path(), 2, 100);
    let fc = dir.path().join("fc.jsonl");
    ok(&["forecast", "--ckpt", p(&run_dir.join("final.ptfm")), "--input", p(&input), "--horizon", "16", "--out", p(&fc)]);

    let bare = dir.path().join("bare.svg");
    ok(&["plot", "--forecast", p(&fc), "--out", p(&bare)]);
    let text = fs::read_to_string(&bare).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let classes: Vec<&str> = doc.descendants().filter_map(|n| n.attribute("class")).collect();
    assert!(classes.contains(&"band") && classes.contains(&"median"), "{classes:?}");
    assert!(!classes.contains(&"truth"));

    let with_truth = dir.path().join("truth.svg");
    ok(&["plot", "--forecast", p(&fc), "--truth", p(&input), "--id", "sine-1", "--out", p(&with_truth)]);
    let text = fs::read_to_string(&with_truth).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("truth")));

    let r = run(&["plot", "--forecast", p(&fc), "--id", "nope", "--out", p(&bare)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown subcommand and missing files are usage errors.
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&run(&["train", "--config", p(&missing), "--out", p(dir.path())])), 2);
    // Bad override path.
    let cfg = tiny_config(dir.path(), TRAIN_12);
    let r = run(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x")), "--set", "train.nope=1"]);
    assert_eq!(code(&r), 2);
    // A learning rate this large blows the weights up within a few steps.
    let r = run(&[
        "train", "--config", p(&cfg), "--out", p(&dir.path().join("y")), "--set", "train.peak_lr=1e300", "--set",
        "train.min_lr=1e299",
    ]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    // Corrupt checkpoint.
    let bad = dir.path().join("bad.ptfm");
    fs::write(&bad, b"PTFM not really").unwrap();
    let input = sines(dir.path(), 1, 100);
    let r = run(&["forecast", "--ckpt", p(&bad), "--input", p(&input), "--horizon", "8", "--out", p(&dir.path().join("f"))]);
    assert_eq!(code(&r), 2);
}
