use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = r#"
seeds = [3]
strategy = "rmc"

[data]
train_size = 200
dev_size = 60
adversarial_size = 60

[model]
embed_dim = 16
num_layers = 2
num_heads = 2
ffn_dim = 32

[train]
epochs = 2
batch_size = 32

[compression]
family = "truncate"
student_layers = 1
heads_to_prune = 1
sweep_sparsities = [0.2, 0.6]
"#;

fn rmc(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run rmc")
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn error_record(output: &Output) -> serde_json::Value {
    assert!(!output.status.success());
    let line = String::from_utf8_lossy(&output.stderr);
    serde_json::from_str(line.trim()).expect("stderr is one JSON record")
}

fn setup(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("micro.toml");
    fs::write(&config, text).unwrap();
    (dir, config)
}

#[test]
fn datagen_train_eval_smoke() {
    let (dir, config) = setup(MICRO);
    let out = dir.path().join("runs");
    ok(&rmc(&["datagen"], &config, &out));
    for split in ["train", "dev", "adversarial"] {
        assert!(out.join(format!("seed-3/data/{split}.tsv")).exists());
    }
    let teacher = rmc(&["train-teacher"], &config, &out);
    ok(&teacher);
    let report: serde_json::Value = serde_json::from_slice(&teacher.stdout).unwrap();
    assert_eq!(report["dev_size"], 60);
    ok(&rmc(&["eval"], &config, &out));
    let json = fs::read_to_string(out.join("seed-3/reports/eval.json")).unwrap();
    let reports: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(reports[0]["model"], "teacher");
    assert!(out.join("seed-3/reports/eval.csv").exists());
}

#[test]
fn full_pipeline_and_eval_determinism() {
    let (dir, config) = setup(MICRO);
    let out = dir.path().join("runs");
    for cmd in ["datagen", "train-teacher", "compress", "mitigate"] {
        ok(&rmc(&[cmd], &config, &out));
    }
    ok(&rmc(&["mitigate", "--strategy", "focal"], &config, &out));
    assert!(out.join("seed-3/students/truncate-1-rmc.rmck").exists());
    assert!(out.join("seed-3/students/truncate-1-focal.rmck").exists());
    assert!(out.join("seed-3/difficulty.tsv").exists());

    ok(&rmc(&["eval"], &config, &out));
    let first = fs::read(out.join("seed-3/reports/eval.json")).unwrap();
    let first_csv = fs::read(out.join("seed-3/reports/eval.csv")).unwrap();
    ok(&rmc(&["eval"], &config, &out));
    assert_eq!(first, fs::read(out.join("seed-3/reports/eval.json")).unwrap());
    assert_eq!(first_csv, fs::read(out.join("seed-3/reports/eval.csv")).unwrap());

    let sweep = rmc(&["sweep", "--strategy", "vanilla"], &config, &out);
    ok(&sweep);
    let rows: serde_json::Value = serde_json::from_slice(&sweep.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let csv = fs::read_to_string(out.join("seed-3/reports/sweep-vanilla.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn missing_artifact_names_the_file() {
    let (dir, config) = setup(MICRO);
    let out = dir.path().join("runs");
    let output = rmc(&["train-teacher"], &config, &out);
    let record = error_record(&output);
    assert_eq!(record["error"], "missing_artifact");
    assert!(record["path"].as_str().unwrap().ends_with("train.tsv"));
}

#[test]
fn missing_config_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let output = rmc(&["datagen"], &dir.path().join("absent.toml"), dir.path());
    assert_eq!(error_record(&output)["error"], "missing_artifact");
}

#[test]
fn eval_refuses_checkpoints_from_another_config() {
    let (dir, config) = setup(MICRO);
    let out = dir.path().join("runs");
    ok(&rmc(&["datagen"], &config, &out));
    ok(&rmc(&["train-teacher"], &config, &out));
    let changed = dir.path().join("changed.toml");
    fs::write(&changed, MICRO.replace("epochs = 2", "epochs = 3")).unwrap();
    let record = error_record(&rmc(&["eval"], &changed, &out));
    assert_eq!(record["error"], "config_mismatch");
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let (dir, config) = setup(MICRO);
    let output = rmc(&["mitigate", "--strategy", "magic"], &config, dir.path());
    assert_eq!(error_record(&output)["error"], "config");
}

#[test]
fn unknown_config_key_is_rejected() {
    let (dir, config) = setup(&format!("{MICRO}\n[extra]\nkey = 1\n"));
    let output = rmc(&["datagen"], &config, dir.path());
    assert!(!output.status.success());
}
