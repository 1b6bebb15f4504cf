use std::path::PathBuf;
use std::process::{Command, Output};

fn coopnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coopnav")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_accepts_shipped_scenario() {
    let o = coopnav(&["validate", "--scenario", &scenario("small.toml")]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ok: 2 vehicles, 2 landmarks"));
}

#[test]
fn validate_rejects_bad_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "version = 1\nsensor_range_m = -5.0\n").unwrap();
    let o = coopnav(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn missing_scenario_is_an_io_error() {
    let o = coopnav(&["validate", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_writes_traces_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = ["run", "--scenario", &scenario("small.toml"), "--max-steps", "15"];
    let first = coopnav(&[&args[..], &["--out", out.to_str().unwrap()]].concat());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    for f in ["true_trajectory.csv", "estimated_trajectory.csv", "measurements.csv", "planner.csv", "metrics.csv", "timing.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let second = coopnav(&args);
    let digest = |o: &Output| stdout(o).lines().next().unwrap().to_string();
    assert_eq!(digest(&first), digest(&second));
    assert!(digest(&first).starts_with("seed 1  steps 15  digest "));
}

#[test]
fn seed_flag_changes_the_run() {
    let base = ["run", "--scenario", &scenario("small.toml"), "--max-steps", "5"];
    let a = coopnav(&base);
    let b = coopnav(&[&base[..], &["--seed", "2"]].concat());
    assert!(stdout(&b).starts_with("seed 2 "));
    assert_ne!(stdout(&a).lines().next(), stdout(&b).lines().next());
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = coopnav(&[
        "sweep",
        "--scenario",
        &scenario("small.toml"),
        "--max-steps",
        "5",
        "--grid",
        "horizon_s=1,2",
        "--seeds",
        "2",
        "--jobs",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let points = summary["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_rejects_unknown_grid_key() {
    let o = coopnav(&["sweep", "--scenario", &scenario("small.toml"), "--grid", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_passes() {
    let o = coopnav(&["oracle", "--draws", "20"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    assert!(!text.contains("FAIL"));
}
