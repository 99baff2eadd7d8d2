use std::path::{Path, PathBuf};
use std::process::Command;

use gwaudit_cli::commands::load_records;
use gwaudit_cli::{cmd_collect, cmd_train, RunConfig};
use gwaudit_core::client::CallRecord;
use gwaudit_core::jsonl::read_all;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .canonicalize()
        .unwrap()
}

/// Four probes from distinct domains of the sample suite.
fn small_suite(dir: &Path) -> PathBuf {
    let probes: Vec<serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(data_dir().join("probes/sample_suite.json")).unwrap(),
    )
    .unwrap();
    let mut picked = Vec::new();
    let mut domains = Vec::new();
    for p in probes {
        let d = p["domain"].as_str().unwrap().to_string();
        if !domains.contains(&d) {
            domains.push(d);
            picked.push(p);
        }
        if picked.len() == 4 {
            break;
        }
    }
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string(&picked).unwrap()).unwrap();
    path
}

fn config(dir: &Path, suite: &Path, reps: u32, models: &[&str], extra: &str) -> PathBuf {
    let data = data_dir();
    let text = format!(
        "seed = 3\nsuite = {suite:?}\noutput_dir = {:?}\nbaseline = \"official\"\npricing = {:?}\n{extra}\n\
         [repetitions]\nbaseline = {reps}\nsingle_turn = {reps}\n\n\
         [[gateways]]\nname = \"official\"\nbase_url = \"sim://official\"\nauth_env_var = \"OFFICIAL_KEY\"\n\
         models = {models:?}\nscenario = {:?}\n",
        dir.join("out"),
        data.join("pricing.json"),
        data.join("scenarios/clean.toml"),
    );
    let path = dir.join("gwaudit.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_gwaudit"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn collect_writes_one_line_per_call_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path());
    let path = config(dir.path(), &suite, 2, &["atlas-large"], "");
    let cfg = RunConfig::load(&path).unwrap();
    let out = cmd_collect(&cfg, None).unwrap();
    assert_eq!(out[0].summary.as_ref().unwrap().succeeded, 8);
    let records = cfg.output_dir.join("records.jsonl");
    let lines: Vec<CallRecord> = read_all(&records).unwrap();
    assert_eq!(lines.len(), 8);

    // a second run finds everything done
    let again = cmd_collect(&cfg, None).unwrap();
    assert_eq!(again[0].summary.as_ref().unwrap().attempted, 0);
    let lines: Vec<CallRecord> = read_all(&records).unwrap();
    assert_eq!(lines.len(), 8);
    assert_eq!(load_records(&records).unwrap().len(), 8);
}

#[test]
fn training_needs_two_models() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path());
    let path = config(dir.path(), &suite, 2, &["atlas-large"], "");
    let cfg = RunConfig::load(&path).unwrap();
    cmd_collect(&cfg, None).unwrap();
    assert!(cmd_train(&cfg, None).is_err());
}

#[test]
fn unknown_gateway_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path());
    let path = config(dir.path(), &suite, 1, &["atlas-large"], "");
    let cfg = RunConfig::load(&path).unwrap();
    assert!(cmd_collect(&cfg, Some("nope")).is_err());
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "seed = \"not a number\"\n").unwrap();
    assert_eq!(run(&path, &["collect"]), 2);
    assert_eq!(run(&dir.path().join("missing.toml"), &["collect"]), 2);
}

#[test]
fn binary_collects_then_reports_missing_classifiers() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(dir.path());
    let path = config(dir.path(), &suite, 1, &["atlas-large", "borealis-pro"], "");
    assert_eq!(run(&path, &["collect"]), 0);
    // audit before train has nothing to verify against
    assert_eq!(run(&path, &["audit"]), 2);
}
