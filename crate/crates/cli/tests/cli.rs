use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "paths": {
    "corpus_dir": "data/corpus",
    "checkpoint_dir": "data/ckpt",
    "annotation_dir": "data/ann",
    "generated_dir": "data/gen",
    "report_dir": "data/reports"
  },
  "feature_dim": 4,
  "corpora": [{ "n_utterances": 10, "transition_kind": "mild" }],
  "annotator": {
    "model": { "input_dim": 4, "hidden": 8, "layers": 1, "heads": 2, "ff_width": 8 },
    "train": { "epochs": 1 }
  }
}"#;

fn emofilm(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_emofilm"));
    cmd.env_remove("EMOFILM_CONFIG").args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(&config, CONFIG).unwrap();
    (dir, config)
}

#[test]
fn gen_data_writes_one_manifest_per_utterance() {
    let (dir, config) = setup();
    let out = emofilm(&["gen-data"], Some(&config));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let index: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("data/corpus/index.json")).unwrap()).unwrap();
    assert_eq!(index["utterances"].as_array().unwrap().len(), 10);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("data/reports/run_manifest_gen-data.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["produced"].as_array().unwrap().iter().any(|p| p == "data/corpus/index.json"));
}

#[test]
fn config_is_read_from_the_environment() {
    let (dir, config) = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_emofilm")).env("EMOFILM_CONFIG", &config).arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/corpus/index.json").exists());
}

#[test]
fn usage_and_validation_errors_exit_1() {
    assert_eq!(emofilm(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(emofilm(&["gen-data", "--no-such-flag"], None).status.code(), Some(1));
    let (_dir, config) = setup();
    assert_eq!(emofilm(&["gen-data", "--set", "feature_dim=5"], Some(&config)).status.code(), Some(1));
    assert_eq!(emofilm(&["gen-data", "--set", "tts.loss.epsilon=1.5"], Some(&config)).status.code(), Some(1));
    assert_eq!(emofilm(&["--help"], None).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2() {
    let (_dir, config) = setup();
    let out = emofilm(&["train-annotator"], Some(&config));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn describe_reports_shapes_and_rejects_bad_checkpoints() {
    let (dir, config) = setup();
    assert_eq!(emofilm(&["gen-data"], Some(&config)).status.code(), Some(0));
    assert_eq!(emofilm(&["train-annotator"], Some(&config)).status.code(), Some(0));
    let ck = dir.path().join("data/ckpt/annotator.json");
    let out = emofilm(&["describe", ck.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("schema_version: 1"));
    assert!(text.contains("cls_head.weight") && text.contains("reg_head.weight"), "{text}");

    let corrupt = dir.path().join("corrupt.json");
    fs::write(&corrupt, "{\"schema_version\": 1, \"model\": ").unwrap();
    assert_eq!(emofilm(&["describe", corrupt.to_str().unwrap()], None).status.code(), Some(2));

    let future = dir.path().join("future.json");
    let body = fs::read_to_string(&ck).unwrap().replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    fs::write(&future, body).unwrap();
    let out = emofilm(&["describe", future.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}
