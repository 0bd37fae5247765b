use std::fs;
use std::process::Command;

fn vgirsanov() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vgirsanov"))
}

fn summary(dir: &std::path::Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn passing_run_exits_zero_and_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let status = vgirsanov()
        .args([
            "run",
            "unit-oracles",
            "--paths",
            "8",
            "--seed",
            "3",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let s = summary(dir.path());
    assert_eq!(s["scenario"], "unit-oracles");
    assert_eq!(s["seed"], 3);
    assert_eq!(s["pass"], true);
    assert!(s["header"]["generated_at"].is_string());
    assert!(dir.path().join("oracles.csv").exists());
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["run", "no-such-scenario"],
        &["run", "drift-change", "--r-spec", "none", "--paths", "10"],
        &["run", "prop41", "--grid", "30"],
        &["run", "scalar-girsanov", "--confidence", "1.5"],
    ];
    for args in cases {
        let out = vgirsanov()
            .args(args)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn command_line_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "paths = 4\nseed = 11\nbins = 5\n").unwrap();
    let out = dir.path().join("out");
    let status = vgirsanov()
        .args(["run", "unit-oracles", "--seed", "12", "--config"])
        .arg(&file)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["M"], 4);
    assert_eq!(s["seed"], 12);
    assert_eq!(s["config"]["bins"], 5);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "pathz = 4\n").unwrap();
    let status = vgirsanov()
        .args(["run", "unit-oracles", "--config"])
        .arg(&file)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
