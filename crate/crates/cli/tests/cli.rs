use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn agbnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agbnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(agbnet(&["--help"], d.path()).status.code(), Some(0));
    assert_eq!(agbnet(&["--version"], d.path()).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(agbnet(&["frobnicate"], d.path()).status.code(), Some(1));
    assert_eq!(agbnet(&["train"], d.path()).status.code(), Some(1));
    assert_eq!(
        agbnet(&["synth", "--threads", "0"], d.path()).status.code(),
        Some(1)
    );
}

#[test]
fn missing_config_is_a_validation_failure_with_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = agbnet(
        &["synth", "--config", "absent.json", "--out", "o"],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(&d.path().join("o"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("absent.json"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.json"), r#"{"rows": 64, "colz": 64}"#).unwrap();
    let out = agbnet(&["synth", "--config", "c.json", "--out", "o"], d.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_directory_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let out = agbnet(
        &["preprocess", "--input", "nowhere", "--out", "o"],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pixel_independent_model_is_not_trained_on_patches() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("t.json"),
        r#"{"architecture": {"kind": "AU_FC"}}"#,
    )
    .unwrap();
    fs::create_dir(d.path().join("p")).unwrap();
    let out = agbnet(
        &["train", "--input", "p", "--config", "t.json", "--out", "o"],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_and_preprocess_record_their_runs() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("s.json"), r#"{"rows": 64, "cols": 64}"#).unwrap();
    let out = agbnet(
        &[
            "synth", "--config", "s.json", "--seed", "4", "--out", "scene",
        ],
        d.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = manifest(&d.path().join("scene"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["config"]["rows"], 64);

    let out = agbnet(
        &["preprocess", "--input", "scene", "--out", "prep"],
        d.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "stack.btr",
        "labels.btr",
        "footprints_filtered.csv",
        "filter_report.json",
    ] {
        assert!(d.path().join("prep").join(f).exists(), "{f} missing");
    }
    let m = manifest(&d.path().join("prep"));
    assert_eq!(m["inputs"]["sources"], "scene");
}
