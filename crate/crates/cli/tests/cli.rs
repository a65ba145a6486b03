//! End-to-end runs of the `wpgd` binary on a tiny synthetic experiment.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn wpgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wpgd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

fn base_config(out: &Path) -> Value {
    json!({
        "seed": 3,
        "output_dir": out,
        "dataset": { "kind": "synthetic", "samples_per_class": 60, "test_samples_per_class": 30 },
        "model": { "layer_widths": [2, 12, 3], "activation": "tanh" },
        "train": { "mode": "ce", "epochs": 30, "batch_size": 32, "learning_rate": 0.1 },
        "cost_matrix": { "path": "cost.csv", "p": 2 },
        "eval": {
            "attacks": [
                { "epsilon": 0.0, "steps": 5, "norm": "l2", "clamp_range": [-2, 3] },
                { "epsilon": 0.3, "steps": 10, "norm": "l2", "clamp_range": [-2, 3], "objective": "wasserstein" }
            ],
            "boundary": { "resolution": 40 }
        }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    std::fs::write(dir.join("cost.csv"), "0,10,0.01\n10,0,1\n0.01,1,0\n").unwrap();
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_eval_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config(&dir.path().join("runs")));
    let config = config.to_str().unwrap();

    let exp = PathBuf::from(stdout(&wpgd(&["--threads", "1", "train", "-c", config])));
    let hash = exp.file_name().unwrap().to_str().unwrap().to_string();
    for f in ["resolved_config.json", "checkpoint.json", "train_report.json"] {
        assert!(exp.join(f).is_file(), "{f} missing");
    }
    let report = read_json(&exp.join("train_report.json"));
    assert_eq!(report["config_hash"], json!(hash));
    assert!(report["version"].as_str().unwrap().starts_with("wpgd "));
    let last = report["epochs"].as_array().unwrap().last().unwrap().clone();
    assert!(last["natural_error"].as_f64().unwrap() < 2.0);
    let checkpoint = read_json(&exp.join("checkpoint.json"));
    assert_eq!(checkpoint["metadata"]["config_hash"], json!(hash));

    // snapshot inlines the cost matrix and materializes seeds
    let snapshot = read_json(&exp.join("resolved_config.json"));
    assert!(snapshot["cost_matrix"]["matrix"].is_array());
    assert!(snapshot["cost_matrix"].get("path").is_none());
    assert!(snapshot["model"]["seed"].is_u64());
    assert!(snapshot["eval"]["attacks"][0]["step_size"].is_number());

    let eval_dir = PathBuf::from(stdout(&wpgd(&["eval", "-c", config])));
    let metrics = read_json(&eval_dir.join("metrics.json"));
    assert_eq!(metrics["config_hash"], json!(hash));
    // an ε = 0 attack leaves the confusion unchanged
    assert_eq!(metrics["attacks"][0]["adversarial"]["counts"], metrics["natural"]["counts"]);
    assert!(metrics["attacks"][1]["robustness_score"].is_number());
    assert_eq!(metrics["entropy"]["histogram"].as_array().unwrap().len(), 30);
    let boundary = std::fs::read_to_string(eval_dir.join("boundary.csv")).unwrap();
    let mut lines = boundary.lines();
    assert_eq!(lines.next().unwrap(), format!("# {} config {hash}", metrics["version"].as_str().unwrap()));
    assert_eq!(lines.next().unwrap(), "x,y,class");
    assert_eq!(lines.count(), 40 * 40);

    // a checkpoint compared with itself has zero gap and zero score delta
    let ckpt = exp.join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let cmp_dir = PathBuf::from(stdout(&wpgd(&["compare", "-c", config, ckpt, ckpt])));
    let cmp = read_json(&cmp_dir.join("compare.json"));
    let gap = cmp["accuracy_gap"].as_array().unwrap();
    assert!(gap.iter().flat_map(|r| r.as_array().unwrap()).all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(cmp["correlation"], Value::Null);
    assert_eq!(cmp["score_deltas"], json!([0.0, 0.0]));

    // eval against a reference writes the gap file with entries in [0, 1]
    let eval_dir = PathBuf::from(stdout(&wpgd(&["eval", "-c", config, "--reference", ckpt])));
    let metrics = read_json(&eval_dir.join("metrics.json"));
    assert!(metrics["reference"]["accuracy_gap"].is_array());
    assert!(eval_dir.join("accuracy_gap.csv").is_file());
}

#[test]
fn identical_configs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config(&dir.path().join("runs")));
    let config = config.to_str().unwrap();
    let a = PathBuf::from(stdout(&wpgd(&["train", "-c", config])));
    let first = std::fs::read(a.join("train_report.json")).unwrap();
    let b = PathBuf::from(stdout(&wpgd(&["--threads", "1", "train", "-c", config])));
    assert_eq!(a, b);
    assert_eq!(first, std::fs::read(b.join("train_report.json")).unwrap());
}

#[test]
fn validate_config_prints_a_stable_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config(&dir.path().join("runs")));
    let config = config.to_str().unwrap();
    let snapshot = stdout(&wpgd(&["validate-config", "-c", config]));
    let path = dir.path().join("snapshot.json");
    std::fs::write(&path, &snapshot).unwrap();
    let again = stdout(&wpgd(&["validate-config", "-c", path.to_str().unwrap()]));
    assert_eq!(snapshot, again);
}

#[test]
fn set_and_eps_255_flags_reach_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config(&dir.path().join("runs")));
    let out = stdout(&wpgd(&[
        "validate-config",
        "-c",
        config.to_str().unwrap(),
        "--set",
        "train.epochs=7",
        "--set",
        "eval.attacks.1.epsilon=51",
        "--eps-255",
    ]));
    let snapshot: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(snapshot["train"]["epochs"], json!(7));
    assert_eq!(snapshot["eval"]["attacks"][1]["epsilon"], json!(0.2));
}

#[test]
fn gen_data_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &base_config(&dir.path().join("runs")));
    let out = stdout(&wpgd(&["gen-data", "-c", config.to_str().unwrap()]));
    let paths: Vec<&str> = out.lines().collect();
    assert_eq!(paths.len(), 2);
    let train = std::fs::read_to_string(paths[0]).unwrap();
    let mut lines = train.lines().skip(1);
    assert_eq!(lines.next().unwrap(), "x1,x2,label");
    assert_eq!(lines.count(), 180);
}

#[test]
fn exit_codes_follow_the_failure_category() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");

    // config error: wpgd without a cost matrix
    let mut cfg = base_config(&runs);
    cfg.as_object_mut().unwrap().remove("cost_matrix");
    cfg["eval"]["attacks"] = json!([]);
    cfg["train"] = json!({ "mode": "wpgd", "attack": { "epsilon": 0.2, "steps": 3 } });
    let path = write_config(dir.path(), &cfg);
    let out = wpgd(&["train", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cost_matrix"));

    // numeric failure: a learning rate that overflows the weights
    let mut cfg = base_config(&runs);
    cfg["train"]["learning_rate"] = json!(1e300);
    cfg["train"]["momentum"] = json!(0.0);
    let path = write_config(dir.path(), &cfg);
    let out = wpgd(&["train", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // i/o error: missing config file
    let out = wpgd(&["train", "-c", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));

    // class-count mismatch between checkpoint and config
    let path = write_config(dir.path(), &base_config(&runs));
    let exp = PathBuf::from(stdout(&wpgd(&["train", "-c", path.to_str().unwrap()])));
    let mut four = base_config(&runs);
    four["dataset"]["centers"] = json!([[0, 0], [1, 0], [0, 1], [1, 1]]);
    four["model"]["layer_widths"] = json!([2, 12, 4]);
    four.as_object_mut().unwrap().remove("cost_matrix");
    four["eval"]["attacks"] = json!([]);
    let path = write_config(dir.path(), &four);
    let ckpt = exp.join("checkpoint.json");
    let out = wpgd(&["eval", "-c", path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
