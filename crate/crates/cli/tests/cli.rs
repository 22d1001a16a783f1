use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graphs4_cli::{cmd_synth, parse_config, CliError, RunLock};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphs4"))
}

fn run(args: &[&str], config: &Path, output: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--output").arg(output).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SMALL: &str = r#"{
  "seed": 3,
  "dataset_id": "tiny",
  "model": {"num_layers": 1, "state_dim": 4, "channels": 2, "diffusion_steps": 1, "num_nodes": 16, "emb_dim": 3},
  "train": {"batch_size": 8, "epochs_population": 1, "epochs_clinical_max": 2, "early_stop_patience": 1},
  "finetune": {"batch_size": 8, "lr": 0.001, "epochs_clinical_max": 2, "early_stop_patience": 1},
  "synth": {"num_nodes": 16, "timepoints": 48, "counts": {"population": 16, "clinical_ss_train": 12, "clinical_ss_val": 16, "clinical_cv": 20}},
  "cv": {"folds": 2, "repeats": 1},
  "finetune_from": "A"
}"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn unknown_field_names_its_path() {
    let err = parse_config(r#"{"model": {"num_layers": 2, "state_size": 8}}"#).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("model"), "{err}");
    assert!(err.to_string().contains("state_size"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"train": {"lr": "fast"}}"#);
    let out = run(&["pretrain"], &cfg, &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("train.lr"), "{}", text(&out));
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let output = dir.path().join("run");

    let out = run(&["screen"], &cfg, &output);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("partition.json"), "{}", text(&out));

    assert!(run(&["synth"], &cfg, &output).status.success());
    let out = run(&["screen"], &cfg, &output);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("A.gs4m"), "{}", text(&out));

    let missing = dir.path().join("nope.json");
    let out = run(&["synth"], &missing, &output);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let output = dir.path().join("run");
    let lock = RunLock::acquire(&output).unwrap();
    let out = run(&["synth"], &cfg, &output);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains(RunLock::FILE), "{}", text(&out));
    drop(lock);
    assert!(!output.join(RunLock::FILE).exists());
    assert!(run(&["synth"], &cfg, &output).status.success());
}

#[test]
fn synth_requires_its_section() {
    let cfg = parse_config("{}").unwrap();
    assert!(matches!(cmd_synth(&cfg), Err(CliError::Validation(_))));
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let output = dir.path().join("run");
    for cmd in ["synth", "pretrain", "screen"] {
        let out = run(&[cmd], &cfg, &output);
        assert!(out.status.success(), "{cmd}: {}", text(&out));
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(output.join("screen_report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_object().unwrap();
    assert_eq!(rows.len(), 4);
    for row in rows.values() {
        let a = row["auroc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
    assert_eq!(report["dataset_id"], "tiny");

    let sample = fs::read_dir(output.join("synth/data")).unwrap().next().unwrap().unwrap().path();
    let out = bin().arg("score").arg("--config").arg(&cfg).arg("--output").arg(&output).arg(&sample).output().unwrap();
    assert!(out.status.success(), "{}", text(&out));
    let lines: Vec<String> = String::from_utf8_lossy(&out.stdout).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    for line in &lines {
        let score: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(score.is_finite() && score >= 0.0);
    }

    let out = bin().arg("adjacency").arg("--config").arg(&cfg).arg("--output").arg(&output).arg("B").output().unwrap();
    assert!(out.status.success(), "{}", text(&out));
    let csv = fs::read_to_string(output.join("adjacency/B.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    // Identity plus a row-stochastic learned part.
    for (i, row) in csv.lines().enumerate() {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert!((vals.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        assert!(vals[i] >= 1.0 && vals.iter().all(|&v| v >= 0.0));
    }

    for cmd in ["finetune", "eval"] {
        let out = run(&[cmd], &cfg, &output);
        assert!(out.status.success(), "{cmd}: {}", text(&out));
    }
    assert!(output.join("checkpoints/classifier.gs4m").exists());
    let cv: serde_json::Value = serde_json::from_str(&fs::read_to_string(output.join("cv_result.json")).unwrap()).unwrap();
    assert_eq!(cv["per_fold"].as_array().unwrap().len(), 2);
    assert!(!output.join(RunLock::FILE).exists());
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let hash = |seed: &str, name: &str| {
        let output = dir.path().join(name);
        let out = bin().arg("synth").arg("--config").arg(&cfg).arg("--output").arg(&output).arg("--seed").arg(seed).output().unwrap();
        assert!(out.status.success(), "{}", text(&out));
        let mut files: Vec<PathBuf> = fs::read_dir(output.join("synth/data")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().flat_map(|f| fs::read(f).unwrap()).collect::<Vec<u8>>()
    };
    assert_eq!(hash("5", "a"), hash("5", "b"));
    assert_ne!(hash("5", "c"), hash("6", "d"));
}

#[test]
fn partial_finetune_section_keeps_finetune_defaults() {
    let cfg = parse_config(r#"{"finetune": {"batch_size": 4}, "train": {"batch_size": 4}}"#).unwrap();
    assert_eq!(cfg.finetune.batch_size, 4);
    assert_eq!(cfg.finetune.lr, graphs4::training::TrainConfig::finetune_default().lr);
    assert_eq!(cfg.train.lr, graphs4::training::TrainConfig::default().lr);
    let err = parse_config(r#"{"finetune": {"rate": 1}}"#).unwrap_err();
    assert!(err.to_string().contains("finetune") && err.to_string().contains("rate"), "{err}");
}
