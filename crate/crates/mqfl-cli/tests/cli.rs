//! End-to-end checks of the binary: verbs, exit codes, and artifact layout.

use std::path::Path;
use std::process::{Command, Output};

fn mqfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mqfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config_json(output_dir: &Path, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "schema_version": 1,
        "modalities": [
            {"name": "audio", "input_dim": 2, "num_qubits": 1, "num_layers": 1},
            {"name": "video", "input_dim": 2, "num_qubits": 1, "num_layers": 1}
        ],
        "fusion_layers": 1,
        "num_classes": 2,
        "num_clients": 2,
        "rounds": 2,
        "local_epochs": 1,
        "optimizer": {"kind": "sgd", "learning_rate": 0.1},
        "partition": {"scheme": "iid"},
        "dataset": {"source": "synthetic", "num_samples": 40,
                    "class_separation": 4.0, "cross_modal_weight": 0.0},
        "master_seed": seed,
        "output_dir": output_dir.to_str().unwrap()
    })
}

fn write_config(dir: &Path, name: &str, config: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), "config.json", &tiny_config_json(&out_dir, 5));
    let output = mqfl(&["run", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("final test accuracy"));
    let csv = std::fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per round");
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("model.json").exists());
    assert!(out_dir.join("test.mmqf").exists());
}

#[test]
fn identical_configs_give_byte_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let config_a = write_config(dir.path(), "a.json", &tiny_config_json(&out_a, 9));
    let config_b = write_config(dir.path(), "b.json", &tiny_config_json(&out_b, 9));
    assert_eq!(mqfl(&["run", config_a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(mqfl(&["run", config_b.to_str().unwrap()]).status.code(), Some(0));
    let csv_a = std::fs::read(out_a.join("rounds.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("rounds.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn invalid_config_exits_two_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let mut config = tiny_config_json(&out_dir, 5);
    config["modalities"][0]["num_qubits"] = serde_json::json!(20);
    let path = write_config(dir.path(), "config.json", &config);
    let output = mqfl(&["run", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("qubit_cap"));
}

#[test]
fn malformed_json_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{ this is not json").unwrap();
    let output = mqfl(&["run", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn sweep_merges_cells_and_flags_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let mut config = tiny_config_json(&out_dir, 6);
    config["rounds"] = serde_json::json!(1);
    let path = write_config(dir.path(), "config.json", &config);

    let ok = mqfl(&[
        "sweep",
        path.to_str().unwrap(),
        "--axis",
        "clients",
        "--values",
        "2,4",
    ]);
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per cell");

    // 400 clients cannot be covered by 30 training samples: the cell fails,
    // the sweep continues, and the exit code is nonzero.
    let mixed = mqfl(&[
        "sweep",
        path.to_str().unwrap(),
        "--axis",
        "clients",
        "--values",
        "400,2",
    ]);
    assert_eq!(mixed.status.code(), Some(1));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("failed"));

    let bad_axis = mqfl(&["sweep", path.to_str().unwrap(), "--axis", "bogus", "--values", "1"]);
    assert_eq!(bad_axis.status.code(), Some(2));
}

#[test]
fn evaluate_scores_a_checkpoint_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), "config.json", &tiny_config_json(&out_dir, 7));
    assert_eq!(mqfl(&["run", config.to_str().unwrap()]).status.code(), Some(0));

    let report_path = dir.path().join("evaluation.json");
    let output = mqfl(&[
        "evaluate",
        out_dir.join("model.json").to_str().unwrap(),
        out_dir.join("test.mmqf").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    assert!(String::from_utf8_lossy(&output.stdout).contains("overall accuracy"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["overall_accuracy"], summary["final_test_accuracy"]);

    // Evaluating against the checkpoint itself is a shape mismatch.
    let mismatch = mqfl(&[
        "evaluate",
        out_dir.join("model.json").to_str().unwrap(),
        out_dir.join("rounds.csv").to_str().unwrap(),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn worker_count_env_var_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = write_config(dir.path(), "config.json", &tiny_config_json(&out_dir, 8));

    let good = Command::new(env!("CARGO_BIN_EXE_mqfl"))
        .args(["run", config.to_str().unwrap()])
        .env("MQFL_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(good.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&good.stderr));

    let bad = Command::new(env!("CARGO_BIN_EXE_mqfl"))
        .args(["run", config.to_str().unwrap()])
        .env("MQFL_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("MQFL_WORKERS"));
}
