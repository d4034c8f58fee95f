//! Exit-code contract for the command-line front end.

use std::path::Path;
use std::process::Command;

fn coiba(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_coiba"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"bottleneck": {"betaa": 2.0}}"#).unwrap();
    let out = coiba(&["--config", cfg.to_str().unwrap(), "train-toy"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("betaa"), "stderr: {}", stderr);
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = coiba(&["attribute", "--synthetic", "1"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn image_and_synthetic_together_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"train": {"epochs": 1, "train_samples": 16, "holdout_samples": 4}}"#,
    )
    .unwrap();
    let trained = coiba(&["--config", cfg.to_str().unwrap(), "train-toy"], dir.path());
    assert!(trained.status.success());
    let out = coiba(
        &["attribute", "--image", "nope.pgm", "--synthetic", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mutually exclusive"), "stderr: {}", stderr);
}
