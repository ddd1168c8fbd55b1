use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sws_mil::metrics::{self, DumpEntry, PredictionDump};

const BIN: &str = env!("CARGO_BIN_EXE_sws-mil");

const QUICK: [&str; 8] = [
    "--set",
    "rounds=2",
    "--set",
    "warmup_epochs=3",
    "--set",
    "epochs_per_round=2",
    "--set",
    "hidden_dim=16",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn sws-mil")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "sws-mil {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_spec(dir: &Path) -> PathBuf {
    let mut spec = serde_json::to_value(sws_mil::synthgen::default_benchmark()).unwrap();
    spec["train_bags"] = 40.into();
    spec["val_bags"] = 10.into();
    spec["test_bags"] = 10.into();
    spec["min_instances"] = 8.into();
    spec["max_instances"] = 16.into();
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path
}

fn small_store(dir: &Path) -> PathBuf {
    let spec = small_spec(dir);
    let data = dir.join("data");
    ok(&["synth", s(&spec), s(&data)]);
    data
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = small_store(dir);
    let out = dir.join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
    args.extend(QUICK);
    ok(&args);
    (data, out)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_default_writes_300_bags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("store");
    ok(&["synth", "--default", s(&out)]);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["bags"].as_array().unwrap().len(), 300);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 301);
}

#[test]
fn synth_rejects_invalid_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    let mut v = read_json(&spec);
    v["noise_sigma"] = (-1.0).into();
    fs::write(&spec, v.to_string()).unwrap();
    let out = run(&["synth", s(&spec), s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_sigma"));
}

#[test]
fn synth_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth"]).status.code(), Some(2));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["synth", "--default", s(&a), s(&b)]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--set", "seed=1", s(&a)]).status.code(), Some(2));
}

#[test]
fn synth_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", s(&spec), s(&a)]);
    ok(&["synth", s(&spec), s(&b)]);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let c = dir.path().join("c");
    ok(&["synth", s(&spec), s(&c), "--set", "seed=7"]);
    assert_ne!(
        fs::read(a.join("bag_00000.f32")).unwrap(),
        fs::read(c.join("bag_00000.f32")).unwrap()
    );
}

#[test]
fn train_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = trained(dir.path());
    for f in ["report.json", "pseacc.csv", "best.ckpt", "last.ckpt", "rounds/round_001.json", "rounds/round_002.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["rounds"], 2);
    assert_eq!(report["best_checkpoint"], "best.ckpt");
    let plan = read_json(&out.join("rounds/round_001.json"));
    assert_eq!(plan["round"], 1);
    assert!(plan["pseudo_bags"].as_array().unwrap().len() >= 40);
}

#[test]
fn override_rounds_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_store(dir.path());
    let out = dir.path().join("one");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
    args.extend(QUICK);
    args.extend(["--set", "rounds=1"]);
    ok(&args);
    assert_eq!(read_json(&out.join("report.json"))["rounds"].as_array().unwrap().len(), 1);
}

#[test]
fn config_file_and_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_store(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"rounds": 1, "warmup_epochs": 2, "epochs_per_round": 1, "hidden_dim": 8, "seed": 5}"#).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(read_json(&out.join("report.json"))["config"]["seed"], 5);

    fs::write(&cfg, r#"{"rounds": 1, "colour": "blue"}"#).unwrap();
    let bad = run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = run(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_store(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
        args.extend(QUICK);
        ok(&args);
        outputs.push(out);
    }
    for f in ["report.json", "best.ckpt", "last.ckpt", "pseacc.csv", "rounds/round_002.json"] {
        assert_eq!(fs::read(outputs[0].join(f)).unwrap(), fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_reproduces_report_and_metrics_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = trained(dir.path());
    let dump_path = dir.path().join("eval.json");
    let printed = ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("best.ckpt")),
        "--data",
        s(&data),
        "--split",
        "test",
        "--out",
        s(&dump_path),
    ]);
    let metrics_json: Value = serde_json::from_slice(&printed.stdout).unwrap();
    let report = read_json(&out.join("report.json"));
    assert_eq!(metrics_json, report["final_test"]);

    // recompute from the dumped predictions
    let evaluation = read_json(&dump_path);
    let samples: Vec<DumpEntry> = evaluation["predictions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| DumpEntry {
            truth: p["label"].as_u64().unwrap() as usize,
            predicted: p["predicted"].as_u64().unwrap() as usize,
            probs: p["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect(),
        })
        .collect();
    let dump = PredictionDump::new(2, samples).unwrap();
    assert_eq!(metrics_json["acc"].as_f64().unwrap(), metrics::accuracy(&dump).unwrap());
    assert_eq!(metrics_json["f1"].as_f64().unwrap(), metrics::macro_f1(&dump).unwrap());
    assert_eq!(metrics_json["auc"].as_f64().unwrap(), metrics::auc_ovr(&dump).unwrap());
}

#[test]
fn eval_missing_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_store(dir.path());
    let out = run(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt")), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["eval", "--data", s(&data)]).status.code(), Some(2));
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = trained(dir.path());
    let spec = small_spec(dir.path());
    let other = dir.path().join("wide");
    ok(&["synth", s(&spec), s(&other), "--set", "dim=8", "--set", "class_means=[[2.8,0,0,0,0,0,0,0],[0,2.8,0,0,0,0,0,0]]"]);
    let res = run(&["eval", "--checkpoint", s(&out.join("best.ckpt")), "--data", s(&other)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("dimension"));
}

#[test]
fn pseacc_csv_has_two_rows_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_store(dir.path());
    let csv = dir.path().join("p.csv");
    let mut args = vec!["pseacc", "--data", s(&data), "--out", s(&csv)];
    args.extend(QUICK);
    ok(&args);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,method,pseacc"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    for method in ["adapse", "random"] {
        let rounds: Vec<usize> = rows.iter().filter(|r| r[1] == method).map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(rounds, vec![1, 2]);
    }
    for r in &rows {
        // empty when the round labeled nothing
        if r[2].is_empty() {
            assert_eq!(r[1], "adapse");
            continue;
        }
        let v: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn heatmap_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = trained(dir.path());
    let csv = dir.path().join("h.csv");
    ok(&["heatmap", "--checkpoint", s(&out.join("best.ckpt")), "--data", s(&data), "--bag", "test_0001", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("instance_index,attention_score,oracle_label"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let total: f64 = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), i);
        assert!(r[2] == "0" || r[2] == "1");
    }
    let missing = run(&["heatmap", "--checkpoint", s(&out.join("best.ckpt")), "--data", s(&data), "--bag", "nope", "--out", s(&csv)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn heatmap_singleton_bag_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = trained(dir.path());
    let spec = small_spec(dir.path());
    let single = dir.path().join("single");
    ok(&["synth", s(&spec), s(&single), "--set", "min_instances=1", "--set", "max_instances=1"]);
    let csv = dir.path().join("h.csv");
    ok(&["heatmap", "--checkpoint", s(&out.join("best.ckpt")), "--data", s(&single), "--bag", "val_0003", "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,1,"), "{}", rows[0]);
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_store(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
    args.extend(QUICK);
    args.extend(["--set", "lr_initial=1e300"]);
    let res = run(&args);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
