//! End-to-end checks of the command-line front end: exit codes, config
//! diagnostics, determinism of artifacts, and override semantics.

use std::fs;
use std::path::Path;
use std::process::Command;

use multimatch::config::serialize_config;
use multimatch::trainer::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multimatch"))
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        n_domains: 2,
        classes: 2,
        dim: 4,
        labels_per_class: 3,
        unlabeled_per_class: 5,
        target_domain: 2,
        labeled_batch: 3,
        unlabeled_batch: 3,
        max_iter: 6,
        epoch_iters: 3,
        hidden_width: 6,
        hidden_layers: 1,
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, serialize_config(config)).unwrap();
    path
}

#[test]
fn missing_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let broken: String = serialize_config(&tiny_config())
        .lines()
        .filter(|l| !l.starts_with("tau"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("broken.cfg");
    fs::write(&path, broken).unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("tau"), "stderr must name the key: {stderr}");
}

#[test]
fn invalid_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--test-rule", "sideways", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--grid", "table99", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    for name in ["a", "b"] {
        let status = bin()
            .args(["--config", cfg.to_str().unwrap(), "--out"])
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = fs::read(dir.path().join("a").join("metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b").join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn test_rule_override_changes_only_evaluation() {
    // The test-fusion rule plays no part in training, so two runs differing
    // only in it share checkpoint bytes and pseudo-label columns; only the
    // accuracy columns may move.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    for (name, rule) in [("base", "global-only"), ("fused", "avg-all")] {
        let status = bin()
            .args(["--config", cfg.to_str().unwrap(), "--test-rule", rule, "--out"])
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let ckpt_a = fs::read(dir.path().join("base").join("checkpoint.txt")).unwrap();
    let ckpt_b = fs::read(dir.path().join("fused").join("checkpoint.txt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "training must not depend on the test rule");

    let csv_a = fs::read_to_string(dir.path().join("base").join("metrics.csv")).unwrap();
    let csv_b = fs::read_to_string(dir.path().join("fused").join("metrics.csv")).unwrap();
    for (row_a, row_b) in csv_a.lines().zip(csv_b.lines()).skip(1) {
        let a: Vec<&str> = row_a.split(',').collect();
        let b: Vec<&str> = row_b.split(',').collect();
        // epoch, losses, and pseudo-label columns agree exactly.
        assert_eq!(a[..6], b[..6]);
    }
}

#[test]
fn seeds_flag_runs_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out_dir = dir.path().join("multi");
    let status = bin()
        .args(["--config", cfg.to_str().unwrap(), "--seeds", "3,4", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("seed3").join("summary.json").is_file());
    assert!(out_dir.join("seed4").join("summary.json").is_file());
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn grid_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    config.max_iter = 4;
    config.epoch_iters = 2;
    let cfg = write_config(dir.path(), &config);
    let grid = dir.path().join("grid.txt");
    fs::write(&grid, "solo local-only global-only shared shared\n").unwrap();
    let out_dir = dir.path().join("grid-out");
    let status = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--grid",
            grid.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
        ])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("grid_summary.json").is_file());

    let status = bin().arg("--report").arg(&out_dir).status().unwrap();
    assert!(status.success());
    assert!(out_dir.join("report.txt").is_file());
    let series = out_dir
        .join("solo")
        .join("target0")
        .join("seed1")
        .join("pl_precision.csv");
    assert!(series.is_file());
    let text = fs::read_to_string(series).unwrap();
    assert_eq!(text.lines().count(), 3); // header + 2 epochs
}

#[test]
fn report_on_empty_directory_fails_naming_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("--report").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("metrics.csv"), "stderr: {stderr}");
}

#[test]
fn bound_flag_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let path = dir.path().join("bound.json");
    let status = bin()
        .args(["--config", cfg.to_str().unwrap(), "--bound"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&path).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(parsed["total"].as_f64().unwrap().is_finite());
    assert!(parsed["note"].as_str().unwrap().contains("ln(2/delta)"));
}
