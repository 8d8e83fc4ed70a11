use std::fs;
use std::process::{Command, Output};

fn thinkrec(args: &[&str], cwd: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thinkrec")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn missing_prerequisite_exits_3_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = thinkrec(&["gen-synthetic", "--dir", ".", "--users", "40", "--items", "30"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = thinkrec(&["train-experts"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("prepare") || err.contains("collab") || err.contains("global"), "{err}");
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = thinkrec(&["gen-synthetic", "--dir", ".", "--users", "40", "--items", "30"], dir.path());
    assert!(out.status.success());
    let out = thinkrec(&["prepare", "--tau", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(dir.path().join("bad.toml"), "[lm]\nd_model = \"wide\"\n").unwrap();
    let out = thinkrec(&["prepare", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn prepare_reports_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    thinkrec(&["gen-synthetic", "--dir", ".", "--users", "40", "--items", "30"], dir.path());
    let out = thinkrec(&["prepare"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("users 40"), "{text}");
    assert!(dir.path().join("run/processed/interactions.tsv").exists());
}
