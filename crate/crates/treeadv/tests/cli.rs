//! End-to-end tests of the `treeadv` binary: exit codes, emitted files,
//! and config round-tripping.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treeadv"))
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("process terminated by signal")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_RUN: &str = r#"
mode = "treeadv-grpo"
seed = 11
total_steps = 6
batch_size = 2
checkpoint_every = 3
eval_instances = 20

[lr]
schedule = "constant"
rate = 1.0

[rollout]
k = 8
m = 4
top_p = 1.0

[task]
family = "parity"
vocab_size = 12
payload_len = 2
base = 2
length_cap = 32

[policy]
window = 3
feature_kind = "joint"
"#;

#[test]
fn train_writes_outputs_and_exits_zero() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_RUN);
    let out = tmp.path().join("run");
    let output = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(out.join("resolved_config.toml").is_file());
    assert!(out.join("metrics.jsonl").is_file());
    assert!(out.join("latest.json").is_file());
    assert!(out.join("ckpt_step3.bin").is_file());
    assert!(out.join("ckpt_step6.bin").is_file());
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("latest.json")).unwrap()).unwrap();
    assert_eq!(manifest["latest"], "ckpt_step6.bin");
}

#[test]
fn resolved_config_reproduces_identical_metrics() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_RUN);
    let first = tmp.path().join("a");
    let output = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&first)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    let second = tmp.path().join("b");
    let output = bin()
        .args(["train", "--config"])
        .arg(first.join("resolved_config.toml"))
        .arg("--out")
        .arg(&second)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert_eq!(
        std::fs::read(first.join("metrics.jsonl")).unwrap(),
        std::fs::read(second.join("metrics.jsonl")).unwrap(),
        "resolved config must reproduce the run bit-for-bit"
    );
}

#[test]
fn indivisible_tree_count_is_a_config_error() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), &SMALL_RUN.replace("m = 4", "m = 3"));
    let output = bin()
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
    assert!(
        stderr(&output).contains("divisible"),
        "stderr: {}",
        stderr(&output)
    );
}

#[test]
fn resume_with_mismatched_shape_is_a_config_error() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_RUN);
    let out = tmp.path().join("run");
    let output = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    // Same checkpoint, incompatible policy shape.
    let other = write_config(
        &tmp.path().join("."),
        &SMALL_RUN.replace("window = 3", "window = 2"),
    );
    let output = bin()
        .args(["train", "--config"])
        .arg(&other)
        .arg("--resume")
        .arg(out.join("ckpt_step6.bin"))
        .output()
        .unwrap();
    assert_eq!(code(&output), 2, "stderr: {}", stderr(&output));
}

#[test]
fn eval_prints_json_and_checks_vocab() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_RUN);
    let out = tmp.path().join("run");
    let output = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    let output = bin()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--ckpt")
        .arg(out.join("ckpt_step6.bin"))
        .args(["--instances", "25"])
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("eval must print one JSON object");
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    assert!(report["mean_tokens"].as_f64().unwrap() > 0.0);

    // A config with a different vocabulary must be rejected before decoding.
    let other = write_config(
        &tmp.path().join("."),
        &SMALL_RUN.replace("vocab_size = 12", "vocab_size = 14"),
    );
    let output = bin()
        .args(["eval", "--config"])
        .arg(&other)
        .arg("--ckpt")
        .arg(out.join("ckpt_step6.bin"))
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("vocab_size"));
}

#[test]
fn sweep_writes_csv_with_expected_shape() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_RUN);
    let out = tmp.path().join("sweep");
    let output = bin()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--m", "1,2,4"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "m,step,mean_reward,accuracy,tokens_segment,tokens_leaf,clip_fraction,tau"
    );
    assert_eq!(lines.count(), 3 * 6);

    // A tree count that does not divide K is rejected up front.
    let output = bin()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--m", "1,5"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
}

#[test]
fn inspect_forest_emits_annotated_json() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), &SMALL_RUN.replace("m = 4", "m = 1"));
    let out = tmp.path().join("forest.json");
    let output = bin()
        .args(["inspect-forest", "--config"])
        .arg(&config)
        .args(["--prompt-seed", "5"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["format_version"], 1);
    assert_eq!(doc["k"], 8);
    assert_eq!(doc["m"], 1);
    assert_eq!(doc["trees"].as_array().unwrap().len(), 1);
    assert_eq!(doc["rewards"].as_array().unwrap().len(), 8);
    // With a single tree the group mean sits on the root: its token-level
    // advantage is the mean of all sequence advantages, which normalizes
    // to zero.
    let segments = doc["trees"][0]["segments"].as_array().unwrap();
    let root = doc["trees"][0]["root"].as_u64().unwrap();
    let root_seg = segments
        .iter()
        .find(|s| s["id"].as_u64() == Some(root))
        .unwrap();
    assert_eq!(root_seg["leaves_under"].as_array().unwrap().len(), 8);
    assert!(root_seg["token_advantage"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn plot_renders_svg_and_rejects_unknown_fields() {
    let tmp = tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL_RUN);
    let run = tmp.path().join("run");
    let output = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    let svg = tmp.path().join("reward.svg");
    let output = bin()
        .args(["plot", "--metrics"])
        .arg(run.join("metrics.jsonl"))
        .arg("--out")
        .arg(&svg)
        .args(["--y", "mean_reward"])
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let body = std::fs::read_to_string(&svg).unwrap();
    assert!(body.starts_with("<svg") || body.starts_with("<?xml"));
    assert!(body.contains("polyline"));
    assert!(tmp.path().join("reward.csv").is_file());

    let output = bin()
        .args(["plot", "--metrics"])
        .arg(run.join("metrics.jsonl"))
        .arg("--out")
        .arg(&svg)
        .args(["--y", "no_such_metric"])
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("mean_reward"), "error should list valid fields");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let output = bin()
        .args(["train", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
}

#[test]
fn bad_flag_uses_usage_exit_code() {
    let output = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(code(&output), 2);
}
