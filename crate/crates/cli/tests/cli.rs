use std::path::Path;
use std::process::{Command, Output};

fn splitsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitsim"))
        .args(args)
        .current_dir(dir)
        .env("SPLITSIM_THREADS", "1")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"{
  "name": "small",
  "dataset": {
    "source": {"kind": "synthetic", "classes": 3, "per_class": 40, "dim": 4, "separation": 4.0},
    "per_client": 16,
    "validation": 20
  },
  "model": {"widths": [4, 5, 3], "cut": 2},
  "protocol": {"kind": "sglr", "clients": 4, "batch_size": 4, "epochs": 2}
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = splitsim(&["run", "--config", &config, "--seed", "7", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("o/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.contains("\"seed\":7"));
    assert!(dir.path().join("o/summary.csv").exists());
}

#[test]
fn default_out_dir_is_named_after_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = splitsim(&["run", "--config", &config, "--set", "protocol.kind=psl"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("out/small/metrics.jsonl").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("psl"));
}

#[test]
fn sweep_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = splitsim(
        &["sweep", "--config", &config, "--set", "sweep.active_fractions=[0.0,1.0]", "--out", "s"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["sweep.csv", "sweep_table.csv", "metrics.jsonl", "summary.csv"] {
        assert!(dir.path().join("s").join(f).exists(), "{f}");
    }
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn leakage_verb_adds_a_score() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = splitsim(&["leakage", "--config", &config, "--set", "leakage.units=4", "--out", "l"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("leakage="));
}

#[test]
fn cost_prints_csv_without_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = splitsim(&["cost", "--out", "c"], dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("label,method,"));
    assert!(stdout.contains("reference,SGLR,"));
    assert_eq!(std::fs::read_to_string(dir.path().join("c/cost.csv")).unwrap(), stdout);
}

#[test]
fn config_errors_exit_with_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for bad in ["protocol.clients=\"x\"", "protocol.nope=1", "model.cut=9"] {
        let out = splitsim(&["run", "--config", &config, "--set", bad], dir.path());
        assert_eq!(out.status.code(), Some(2), "{bad}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("protocol") || err.contains("model"), "{bad}: {err}");
    }
    let out = splitsim(&["run", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    // the output path is a file, so creating the directory fails after training
    std::fs::write(dir.path().join("taken"), "").unwrap();
    let out = splitsim(&["run", "--config", &config, "--out", "taken"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
