//! Exit codes and stage-by-stage use of the `coreseg` binary.

use std::path::Path;
use std::process::Command;

const TINY: &str = include_str!("fixtures/tiny.toml");

fn coreseg(args: &[&str], config: &Path, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_coreseg"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("base_width = 4", "base_width = 4\nwidth = 3"));
    let out = coreseg(&["synth-data"], &cfg, &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("width"), "{err}");

    let cfg = write_config(dir.path(), TINY);
    let out = coreseg(&["train-closed", "--scenario", "nope"], &cfg, &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_without_upstream_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = coreseg(&["train-cae", "--scenario", "a"], &cfg, &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stages_chain_to_an_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    for stage in ["synth-data", "train-closed", "train-cae", "infer", "calibrate"] {
        let out = coreseg(&[stage, "--scenario", "a"], &cfg, &run);
        assert_eq!(out.status.code(), Some(0), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = coreseg(&["evaluate", "--scenario", "a"], &cfg, &run);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["scenario"], "a");
    assert!(run.join("a").join("report").join("eval_report.json").exists());
}
