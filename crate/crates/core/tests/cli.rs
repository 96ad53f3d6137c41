use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn vllsa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vllsa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn vllsa")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Workspace with a calibration in `cal/` and `run.toml` pointing at it.
fn calibrated() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("empty.toml"), "").unwrap();
    let out = vllsa(
        tmp.path(),
        &["--config", "empty.toml", "--out", "cal", "calibrate"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(
        tmp.path().join("run.toml"),
        "calibration = \"cal/calibration.toml\"\n",
    )
    .unwrap();
    tmp
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&vllsa(tmp.path(), &["hop", "inplace", "vs"])), 2);
    assert_eq!(
        code(&vllsa(tmp.path(), &["--config", "nope.toml", "calibrate"])),
        2
    );
}

#[test]
fn unknown_keys_and_bad_values_are_usage_errors() {
    let tmp = calibrated();
    let dir = tmp.path();
    for set in [
        "spring.colour=3",
        "sim.dt=-1.0",
        "leg.mount=\"boom\"",
        "plan.inplace.hops=0",
    ] {
        let out = vllsa(
            dir,
            &["--config", "run.toml", "--set", set, "hop", "inplace", "vs"],
        );
        assert_eq!(
            code(&out),
            2,
            "{set}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn uncalibrated_runs_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "").unwrap();
    let out = vllsa(tmp.path(), &["--config", "c.toml", "hop", "inplace", "vs"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibrate"));
}

#[test]
fn explicit_calibration_keys_count_as_calibrated() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("c.toml"),
        "[spring]\nlever_e = 0.0446\nlever_a = 0.0249\n[drive]\ntorque_product = 0.112\n",
    )
    .unwrap();
    let out = vllsa(
        tmp.path(),
        &["--config", "c.toml", "--out", "b", "bench", "stiffness"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("b/stiffness.csv").is_file());
}

#[test]
fn underdetermined_calibration_fails() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "").unwrap();
    let out = vllsa(
        tmp.path(),
        &["--config", "c.toml", "calibrate", "--anchor", "12,35,9.43"],
    );
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn hop_writes_its_artifacts_and_report_agrees() {
    let tmp = calibrated();
    let dir = tmp.path();
    let out = vllsa(
        dir,
        &[
            "--config", "run.toml", "--out", "r", "hop", "inplace", "chs",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "trace.csv",
        "metrics.json",
        "events.log",
        "config.toml",
        "run.json",
    ] {
        assert!(dir.join("r").join(f).is_file(), "{f}");
    }
    assert_eq!(
        code(&vllsa(dir, &["--config", "run.toml", "report", "r"])),
        0
    );

    // a tampered metrics file no longer matches its trace
    let path = dir.join("r/metrics.json");
    let text = fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["peak_foot_lift"] = serde_json::json!(9.0);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    assert_eq!(
        code(&vllsa(dir, &["--config", "run.toml", "report", "r"])),
        1
    );
}

#[test]
fn written_config_reproduces_the_run() {
    let tmp = calibrated();
    let dir = tmp.path();
    let first = vllsa(
        dir,
        &["--config", "run.toml", "--out", "a", "hop", "inplace", "vs"],
    );
    assert_eq!(code(&first), 0);
    let second = vllsa(
        dir,
        &[
            "--config",
            "a/config.toml",
            "--out",
            "b",
            "hop",
            "inplace",
            "vs",
        ],
    );
    assert_eq!(
        code(&second),
        0,
        "{}",
        String::from_utf8_lossy(&second.stderr)
    );
    assert_eq!(
        fs::read(dir.join("a/trace.csv")).unwrap(),
        fs::read(dir.join("b/trace.csv")).unwrap()
    );
}

#[test]
fn foreign_directories_are_not_replaced() {
    let tmp = calibrated();
    let dir = tmp.path();
    fs::create_dir(dir.join("precious")).unwrap();
    fs::write(dir.join("precious/keep.txt"), "data").unwrap();
    let out = vllsa(
        dir,
        &[
            "--config", "run.toml", "--out", "precious", "hop", "inplace", "vs",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(dir.join("precious/keep.txt").is_file());

    // own output is replaced on rerun
    assert_eq!(
        code(&vllsa(
            dir,
            &["--config", "run.toml", "--out", "o", "bench", "power"]
        )),
        0
    );
    assert_eq!(
        code(&vllsa(
            dir,
            &["--config", "run.toml", "--out", "o", "bench", "power"]
        )),
        0
    );
}

#[test]
fn sweep_reports_checks_and_fails_on_a_hard_check() {
    let tmp = calibrated();
    let dir = tmp.path();
    let out = vllsa(
        dir,
        &[
            "--config",
            "run.toml",
            "--out",
            "s",
            "sweep",
            "--scenario",
            "forward",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let checks = fs::read_to_string(dir.join("s/checks.csv")).unwrap();
    assert!(checks.contains("vs_clears"));
    assert_eq!(
        fs::read_to_string(dir.join("s/sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    // the in-place energy ordering is a hard check that does not hold
    let out = vllsa(dir, &["--config", "run.toml", "--out", "t", "sweep"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn empty_grid_is_a_no_op() {
    let tmp = calibrated();
    let out = vllsa(
        tmp.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "g",
            "sweep",
            "--grid",
            "sim.tail=[]",
        ],
    );
    assert_eq!(code(&out), 0);
}
