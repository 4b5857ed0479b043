//! Stage caching, artifact-chain checks and suite behaviour on a tiny config.

use std::path::Path;

use coreseg::experiment::{ExperimentConfig, Mode, Pipeline, StageArtifact};
use coreseg::CoreSegError;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(include_str!("fixtures/tiny.toml"), "tiny.toml").unwrap()
}

fn manifest(dir: &Path, stage: &str) -> StageArtifact {
    serde_json::from_slice(&std::fs::read(dir.join(format!("{stage}.manifest.json"))).unwrap()).unwrap()
}

fn mtime(p: &Path) -> std::time::SystemTime {
    std::fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn resume_reuses_cache_and_cae_change_only_retrains_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path(), true);
    let first = p.run_scenario("a").unwrap();
    let sc = dir.path().join("a");
    let backbone_time = mtime(&sc.join("backbone.ckpt"));
    let cae_time = mtime(&sc.join("cae.ckpt"));

    let again = p.run_scenario("a").unwrap();
    assert_eq!(first, again);
    assert_eq!(mtime(&sc.join("backbone.ckpt")), backbone_time);
    assert_eq!(mtime(&sc.join("cae.ckpt")), cae_time);

    let mut changed = tiny();
    changed.cae.alpha = 0.75;
    let cae_before = manifest(&sc, "cae");
    Pipeline::new(changed, dir.path(), true).run_scenario("a").unwrap();
    assert_eq!(mtime(&sc.join("backbone.ckpt")), backbone_time, "backbone must stay cached");
    let cae_after = manifest(&sc, "cae");
    assert_ne!(cae_before.stage_key, cae_after.stage_key, "CAE must be retrained");
    assert_eq!(cae_after.upstream, vec![manifest(&sc, "backbone").fingerprint]);
}

#[test]
fn stale_or_tampered_upstream_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path(), true);
    let sc = p.config.scenario("a").unwrap().clone();
    p.cae(&sc, Mode::Run).unwrap();

    // A different closed-set config makes the stored backbone stale for downstream stages.
    let mut changed = tiny();
    changed.closed_set.epochs = 3;
    let stale = Pipeline::new(changed, dir.path(), true);
    let err = stale.infer(&sc, Mode::Stage).unwrap_err();
    assert!(matches!(err, CoreSegError::ArtifactChain(_)), "{err}");
    assert_eq!(err.exit_code(), 4);

    // Overwriting the checkpoint bytes breaks the recorded output hash.
    let ckpt = dir.path().join("a").join("backbone.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let err = p.infer(&sc, Mode::Stage).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn missing_upstream_is_an_artifact_chain_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path(), false);
    let sc = p.config.scenario("a").unwrap().clone();
    let err = p.cae(&sc, Mode::Stage).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn suite_isolates_failures_and_reports_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    // A plain file where scenario b's directory should go makes only b fail.
    std::fs::write(dir.path().join("b"), b"not a directory").unwrap();
    let p = Pipeline::new(tiny(), dir.path(), false);
    let suite = p.run_suite().unwrap();
    assert_eq!(suite.scenarios.len(), 1);
    assert_eq!(suite.failures.len(), 1);
    assert_eq!(suite.failures[0].0, "b");
    let agg = suite.aggregate.unwrap();
    assert_eq!(agg.mean, suite.scenarios[0].auroc_unknown.unwrap());
    let csv = std::fs::read_to_string(dir.path().join("suite_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let html = std::fs::read_to_string(dir.path().join("summary.html")).unwrap();
    assert!(html.contains("Failed scenarios"));

    // Regenerating the summary is byte-identical; a deleted render is listed.
    let before = std::fs::read(dir.path().join("summary.html")).unwrap();
    assert!(p.summary(&suite).unwrap().is_empty());
    assert_eq!(before, std::fs::read(dir.path().join("summary.html")).unwrap());
    std::fs::remove_file(dir.path().join("a").join("report").join("roc.png")).unwrap();
    let missing = p.summary(&suite).unwrap();
    assert_eq!(missing.len(), 1);
    let html = std::fs::read_to_string(dir.path().join("summary.html")).unwrap();
    assert!(html.contains("Missing artifacts"));
}

#[test]
fn two_runs_give_identical_reports_and_fingerprints() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r1 = Pipeline::new(tiny(), d1.path(), false).run_scenario("b").unwrap();
    let r2 = Pipeline::new(tiny(), d2.path(), false).run_scenario("b").unwrap();
    assert_eq!(r1, r2);
    for stage in ["backbone", "cae", "scores", "calibration"] {
        assert_eq!(
            manifest(&d1.path().join("b"), stage).fingerprint,
            manifest(&d2.path().join("b"), stage).fingerprint,
            "{stage}"
        );
    }
}
