use std::path::Path;
use std::process::{Command, Output};

fn ddmpc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddmpc"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("run ddmpc")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generated_data_can_be_reloaded() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddmpc(dir.path(), &["--seed", "4", "generate-data"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("data.csv");
    assert!(csv.exists());

    let out = ddmpc(dir.path(), &["--data", csv.to_str().unwrap(), "check-pe"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("persistently exciting"));

    // A window longer than the record cannot be excited.
    let out = ddmpc(dir.path(), &["--data", csv.to_str().unwrap(), "check-pe", "--order", "600"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"horizon": 4}"#);
    let out = ddmpc(dir.path(), &["--config", &cfg, "solve-step"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));

    let cfg = write_config(dir.path(), r#"{"no_such_field": 1}"#);
    let out = ddmpc(dir.path(), &["--config", &cfg, "solve-step"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn excessive_noise_fails_the_precheck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"eps_bar": 0.05}"#);
    let out = ddmpc(dir.path(), &["--config", &cfg, "--constants-source", "oracle", "compute-tightening"]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout(&out));
}

#[test]
fn constants_file_drives_the_tightening() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddmpc(dir.path(), &["--format", "json", "estimate-constants"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let constants = dir.path().join("constants.json");
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&constants).unwrap()).unwrap();
    assert_eq!(value["rho"].as_array().unwrap().len(), 10);

    let out = ddmpc(
        dir.path(),
        &["--constants-source", "file", "--constants-file", constants.to_str().unwrap(), "compute-tightening"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("coefficients.csv").exists());
}

#[test]
fn short_closed_loop_writes_its_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"T": 9}"#);
    let out = ddmpc(dir.path(), &["--config", &cfg, "--online-seed", "3", "run-closed-loop"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("closed_loop.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("t,u,y,ytilde,feasible"));
    assert_eq!(lines.count(), 9);
    assert!(dir.path().join("solves.json").exists());
}
