use std::fs;
use std::path::Path;
use std::process::Command;

fn rotorlab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rotorlab"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn missing_required_flag_exits_with_usage_error() {
    let status = rotorlab().args(["sample", "--seed", "1"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = rotorlab().args(["no-such-command"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn malformed_input_exits_with_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = tmp.path().join("out");
    let status = rotorlab().args(["sample", "--config"]).arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    fs::write(&bad, r#"{"motor_count": 5}"#).unwrap();
    let status = rotorlab().args(["sample", "--config"]).arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = rotorlab().args(["train-alloc", "--config"]).arg(&bad).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn sampling_is_reproducible_from_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"motor_count":4,"l_min":0.12,"l_max":0.3,"cone_angle":0.5,"max_tilt":0.2,"neighbor_pos_dev":0.03,"neighbor_ang_dev":0.05}"#).unwrap();
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let status = rotorlab()
            .args(["sample", "--seed", seed, "--count", "3", "--neighbors", "2", "--config"])
            .arg(&spec)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        read_dir_sorted(&out)
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a.len(), 3 * 3 + 1);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let config = String::from_utf8(a[0].1.clone()).unwrap();
    assert!(rotorlab::airframe::AirframeConfig::from_json(&config).is_ok());
}

#[test]
fn study_without_library_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let status = rotorlab().args(["study-savings", "--out"]).arg(tmp.path()).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
