use std::path::Path;
use std::process::{Command, Output};

fn adafuse(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adafuse"))
        .args(args)
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .expect("failed to launch binary")
}

fn run_ok(out_dir: &Path, args: &[&str]) -> String {
    let out = adafuse(out_dir, args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn quickstart_pipeline_on_demo_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let demo = &["--scenario", "demo", "--seed", "3"][..];

    run_ok(out, &[&["generate-data"], demo].concat());
    assert!(out.join("train.jsonl").exists());
    assert!(out.join("resolved_config.json").exists());

    // Later commands pick up the resolved config from the run directory.
    run_ok(out, &["train-baselines"]);
    run_ok(out, &["train-adafuse"]);
    let table = run_ok(out, &["evaluate"]);
    assert!(table.contains("adafuse"), "missing row in:\n{table}");
    assert!(out.join("results.csv").exists());

    let report = run_ok(out, &["analyze-policy"]);
    assert!(report.contains("skip_rate"), "unexpected report:\n{report}");
}

#[test]
fn generate_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        run_ok(dir, &["generate-data", "--scenario", "demo", "--seed", "11"]);
    }
    for name in ["train.jsonl", "test.jsonl"] {
        let lhs = std::fs::read(a.path().join(name)).unwrap();
        let rhs = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(lhs, rhs, "{name} differs between identical runs");
    }
}

#[test]
fn missing_artifacts_exit_nonzero_and_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = adafuse(dir.path(), &["train-adafuse", "--scenario", "demo"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("generate-data") || stderr.contains("train-baselines"),
        "diagnostic should name the missing stage: {stderr}"
    );
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_ok(
        out,
        &["generate-data", "--scenario", "demo", "--seed", "5", "--n-patients", "120"],
    );
    let cfg = std::fs::read_to_string(out.join("resolved_config.json")).unwrap();
    assert!(cfg.contains("\"n_patients\": 120"), "override not resolved:\n{cfg}");
    let lines = std::fs::read_to_string(out.join("train.jsonl")).unwrap();
    let total = lines.lines().count()
        + std::fs::read_to_string(out.join("test.jsonl")).unwrap().lines().count();
    assert_eq!(total, 120);
}
