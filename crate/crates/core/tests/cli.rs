use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supertransport")).args(args).output().expect("binary runs")
}

fn report(out: &Output) -> Vec<Value> {
    serde_json::from_slice::<Value>(&out.stdout).expect("stdout is JSON").as_array().unwrap().clone()
}

#[test]
fn trivial_scenario_is_flat() {
    let path = scenario("trivial.json");
    let out = run(&["check-flat", "--scenario", path.to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let recs = report(&out);
    assert!(!recs.is_empty());
    for r in &recs {
        assert_eq!(r["residual"].as_f64(), Some(0.0));
        assert_eq!(r["pass"], Value::Bool(true));
        assert_eq!(r["inputs_digest"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn witness_fails_with_unit_residual() {
    let path = scenario("nonflat_witness.json");
    let out = run(&["check-flat", "--scenario", path.to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let recs = report(&out);
    let q1 = recs.iter().find(|r| r["name"] == "flat.q=1").unwrap();
    assert!((q1["residual"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let relaxed = run(&["check-flat", "--scenario", path.to_str().unwrap(), "--tol", "flat.q=1=2", "--json"]);
    assert_eq!(relaxed.status.code(), Some(0));
}

#[test]
fn witness_fails_stokes() {
    let path = scenario("nonflat_witness.json");
    let out = run(&["stokes", "--scenario", path.to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let recs = report(&out);
    assert!(recs[0]["residual"].as_f64().unwrap() >= 1e-2);
}

#[test]
fn twisting_on_flat_gauge_scenario_passes() {
    let path = scenario("flat_gauge.json");
    let out = run(&["twisting", "--scenario", path.to_str().unwrap(), "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let recs = report(&out);
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r["pass"] == Value::Bool(true)));
}

#[test]
fn reports_are_deterministic_and_written_to_file() {
    let path = scenario("flat_gauge.json");
    let dir = std::env::temp_dir().join(format!("supertransport-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let file = dir.join("report.json");
    let args = ["cobar", "--scenario", path.to_str().unwrap(), "--json", "--seed", "5"];
    let a = run(&[&args[..], &["--out", file.to_str().unwrap()]].concat());
    let b = run(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(std::fs::read(&file).unwrap(), a.stdout);
    let c = run(&["cobar", "--scenario", path.to_str().unwrap(), "--json", "--seed", "6"]);
    assert_ne!(report(&a)[0]["inputs_digest"], report(&c)[0]["inputs_digest"]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn quadrature_flags_change_digests() {
    let path = scenario("trivial.json");
    let a = report(&run(&["stokes", "--scenario", path.to_str().unwrap(), "--json"]));
    let b = report(&run(&["stokes", "--scenario", path.to_str().unwrap(), "--json", "--quad-n", "100", "--gauss-order", "4"]));
    assert_ne!(a[0]["inputs_digest"], b[0]["inputs_digest"]);
}

#[test]
fn configuration_errors_exit_2() {
    let path = scenario("trivial.json");
    let p = path.to_str().unwrap();
    assert_eq!(run(&["nonsense", "--scenario", p]).status.code(), Some(2));
    assert_eq!(run(&["all", "--scenario", "/no/such/file.json"]).status.code(), Some(2));
    assert_eq!(run(&["all", "--scenario", p, "--tol", "smooth"]).status.code(), Some(2));
    assert_eq!(run(&["all", "--scenario", p, "--tol", "smooth=abc"]).status.code(), Some(2));
    assert_eq!(run(&["all", "--scenario", p, "--quad-n", "0"]).status.code(), Some(2));
}

#[test]
fn evaluation_errors_exit_3() {
    let dir = std::env::temp_dir().join(format!("supertransport-rt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let file = dir.join("pole.json");
    std::fs::write(
        &file,
        r#"{"chart": {"dim": 1}, "dims": [[0, 1]],
            "superconnection": {"components": [{"p": 1, "terms": [{"dx": [1], "matrix": [["x1"]]}]}]},
            "families": [{"name": "pole", "components": ["1/(t-0.5)"]}]}"#,
    )
    .unwrap();
    let out = run(&["transport", "--scenario", file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}
