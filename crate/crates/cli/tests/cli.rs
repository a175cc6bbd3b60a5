use std::path::Path;
use std::process::{Command, Output};

use odorwatch_core::domain::{InteractionEvent, InteractionKind};
use odorwatch_core::formats;
use odorwatch_core::synthetic::{generate, SyntheticConfig};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_odorwatch");

fn odorwatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--data-dir")
        .arg(dir.join("store"))
        .args(args)
        .env_remove("ODORWATCH_SEED")
        .env_remove("ODORWATCH_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON object")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("an error line");
    serde_json::from_str(last).expect("stderr ends with a JSON error")
}

fn synth_store(dir: &Path, hours: usize) {
    ok_json(&odorwatch(dir, &["synth", "--hours", &hours.to_string()]));
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn build_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    synth_store(tmp.path(), 2000);
    let a = ok_json(&odorwatch(
        tmp.path(),
        &["build", "--out", tmp.path().join("a").to_str().unwrap()],
    ));
    let b = ok_json(&odorwatch(
        tmp.path(),
        &["build", "--out", tmp.path().join("b").to_str().unwrap()],
    ));
    assert_eq!(a, b);
    for f in ["X.csv", "y.csv", "dataset.json"] {
        let x = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let y = std::fs::read_to_string(tmp.path().join("a/y.csv")).unwrap();
    // comment, header, then one row per sample
    assert_eq!(y.lines().count(), a["rows"].as_u64().unwrap() as usize + 2);
}

#[test]
fn artifacts_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    synth_store(tmp.path(), 1000);
    let cfg = ok_json(&odorwatch(tmp.path(), &["config"]));
    let hash = cfg["provenance"]["config_hash"].as_str().unwrap().to_string();
    let out = tmp.path().join("b");
    ok_json(&odorwatch(tmp.path(), &["build", "--out", out.to_str().unwrap()]));
    let line = first_line(&out.join("X.csv"));
    assert!(line.starts_with("# config_hash=") && line.contains(&hash), "{line}");
    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(summary["provenance"]["config_hash"], hash.as_str());

    let reseeded = ok_json(&odorwatch(tmp.path(), &["--seed", "3", "config"]));
    assert_ne!(reseeded["provenance"]["config_hash"], hash.as_str());
}

#[test]
fn env_overrides_apply_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str], seed: &str| {
        let out = Command::new(BIN)
            .arg("--data-dir")
            .arg(tmp.path())
            .args(args)
            .env("ODORWATCH_SEED", seed)
            .output()
            .unwrap();
        out
    };
    let c = ok_json(&run(&["config"], "11"));
    assert!(c["config"].as_str().unwrap().contains("seed = 11"));
    let c = ok_json(&run(&["--seed", "5", "config"], "11"));
    assert!(c["config"].as_str().unwrap().contains("seed = 5"));
    let e = err_json(&run(&["config"], "eleven"));
    assert_eq!(e["kind"], "config");
}

#[test]
fn failures_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    synth_store(tmp.path(), 500);
    let e = err_json(&odorwatch(tmp.path(), &["train", "--variant", "cls-xgb"]));
    assert_eq!(e["kind"], "usage");
    assert!(e["error"].as_str().unwrap().contains("cls-xgb"));

    let out = odorwatch(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["kind"], "usage");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[cv]\nfolds = 3\n").unwrap();
    let e = err_json(&odorwatch(tmp.path(), &["--config", bad.to_str().unwrap(), "config"]));
    assert_eq!(e["kind"], "config");

    // 500 hours cannot fill a 48-week training window
    let e = err_json(&odorwatch(
        tmp.path(),
        &["eval", "--out", tmp.path().join("e").to_str().unwrap()],
    ));
    assert_eq!(e["kind"], "evaluation");

    let e = err_json(&odorwatch(tmp.path(), &["synth", "--hours", "500"]));
    assert_eq!(e["kind"], "store");

    let e = err_json(&odorwatch(tmp.path(), &["ingest"]));
    assert_eq!(e["kind"], "usage");
}

#[test]
fn ingest_loads_csv_files() {
    let tmp = tempfile::tempdir().unwrap();
    let b = generate(&SyntheticConfig {
        hours: 200,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let reports = tmp.path().join("reports.csv");
    formats::write_reports(std::fs::File::create(&reports).unwrap(), &b.reports).unwrap();
    let sensors = tmp.path().join("sensors.csv");
    formats::write_sensors(std::fs::File::create(&sensors).unwrap(), &b.readings).unwrap();
    let users = ["a", "a", "b"];
    let events: Vec<InteractionEvent> = users
        .iter()
        .enumerate()
        .map(|(i, u)| InteractionEvent {
            anon_user_id: u.to_string(),
            hit_at: b.config.start + i as i64 * 60,
            data_at: Some(b.config.start),
            kind: InteractionKind::MapClick,
        })
        .collect();
    let log = tmp.path().join("interactions.csv");
    formats::write_interactions(std::fs::File::create(&log).unwrap(), &events).unwrap();

    let s = ok_json(&odorwatch(
        tmp.path(),
        &[
            "ingest",
            "--reports",
            reports.to_str().unwrap(),
            "--sensors",
            sensors.to_str().unwrap(),
            "--interactions",
            log.to_str().unwrap(),
        ],
    ));
    assert_eq!(s["reports"]["stored"], b.reports.len() as u64);
    assert_eq!(s["sensors"]["stored"], b.readings.len() as u64);
    assert_eq!(s["interactions"]["stored"], 3);

    // sensor rows already stored are not duplicated
    let again = ok_json(&odorwatch(
        tmp.path(),
        &["ingest", "--sensors", sensors.to_str().unwrap()],
    ));
    assert_eq!(again["sensors"]["stored"], 0);

    let out = tmp.path().join("an");
    let a = ok_json(&odorwatch(tmp.path(), &["analytics", "--out", out.to_str().unwrap()]));
    assert_eq!(a["users"], 2);
    let shares = std::fs::read_to_string(out.join("user_groups.csv")).unwrap();
    let rows: Vec<Vec<String>> = shares
        .lines()
        .skip(2)
        .filter(|l| !l.starts_with("SIZE"))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for col in [1, 4] {
        let total: f64 = rows.iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
        assert!((total - 100.0).abs() < 0.2, "column {col} sums to {total}");
    }
    for f in [
        "user_group_stats.csv",
        "unigrams.csv",
        "bigrams.csv",
        "heatmap.csv",
        "analytics.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_on_synthetic_store_writes_a_strong_et_row() {
    let tmp = tempfile::tempdir().unwrap();
    // seed 7 is the benchmark's own seed, so the store holds the same data
    ok_json(&odorwatch(tmp.path(), &["--seed", "7", "synth"]));
    let direct = generate(&SyntheticConfig::default())
        .unwrap()
        .dataset(Default::default())
        .unwrap();
    let built = ok_json(&odorwatch(
        tmp.path(),
        &["--seed", "7", "build", "--out", tmp.path().join("b").to_str().unwrap()],
    ));
    assert_eq!(built["rows"], direct.len() as u64);
    assert_eq!(
        built["descriptor_hash"],
        odorwatch_core::evaluation::dataset_hash(&direct).as_str()
    );

    let out = tmp.path().join("eval");
    let s = ok_json(&odorwatch(
        tmp.path(),
        &[
            "--seed",
            "7",
            "eval",
            "--out",
            out.to_str().unwrap(),
            "--variant",
            "cls-et",
            "--trees",
            "200",
        ],
    ));
    assert!(s["reports"][0]["n_test_folds"].as_u64().unwrap() >= 50);
    let csv = std::fs::read_to_string(out.join("cv.csv")).unwrap();
    let mut lines = csv.lines().skip(1);
    assert!(lines.next().unwrap().starts_with("variant,precision_mean"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "cls-et");
    let f: f64 = row[5].parse().unwrap();
    assert!(f >= 0.9, "F = {f}");
}

#[test]
fn train_saves_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    synth_store(tmp.path(), 600);
    let s = ok_json(&odorwatch(
        tmp.path(),
        &["train", "--variant", "reg-rf", "--trees", "10"],
    ));
    let blob = std::fs::read(s["model"].as_str().unwrap()).unwrap();
    let m = odorwatch_core::ensemble::ForestModel::from_bytes(&blob).unwrap();
    assert_eq!(m.params.n_trees, 10);
    assert_eq!(m.descriptor_hash, s["descriptor_hash"].as_str().unwrap());
}

#[test]
fn interpret_selects_once_and_reports_each_run() {
    let tmp = tempfile::tempdir().unwrap();
    synth_store(tmp.path(), 3000);
    let out = tmp.path().join("i");
    let s = ok_json(&odorwatch(
        tmp.path(),
        &[
            "interpret",
            "--out",
            out.to_str().unwrap(),
            "--runs",
            "3",
            "--proximity-trees",
            "60",
            "--rfe-trees",
            "20",
        ],
    ));
    let counts = s["top_feature_counts"].as_object().unwrap();
    assert_eq!(counts.values().map(|v| v.as_u64().unwrap()).sum::<u64>(), 3);
    let full: Value = serde_json::from_slice(&std::fs::read(out.join("interpretation.json")).unwrap()).unwrap();
    assert_eq!(full["runs"].as_array().unwrap().len(), 3);
    assert!(full["selection"]["grid"].as_array().unwrap().len() >= 2);
    assert!(!std::fs::read_to_string(out.join("tree.txt")).unwrap().is_empty());
}
