use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn triangle() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/uk_motor.csv"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reserve-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_on_triangle(args: &[&str]) -> Output {
    let t = triangle();
    let mut full: Vec<&str> = args.to_vec();
    full.extend(["--triangle", t.to_str().unwrap()]);
    run(&full)
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_object(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

#[test]
fn missing_file_is_an_io_error() {
    let out = run(&["fit", "--triangle", "/nonexistent/triangle.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err = error_object(&out);
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["message"].as_str().unwrap().contains("/nonexistent/triangle.csv"));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = run(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_object(&out)["error"]["kind"], "usage");
}

#[test]
fn invalid_configuration_is_reported() {
    let out = run_on_triangle(&["simulate", "--theta", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_object(&out)["error"]["kind"], "config");
}

#[test]
fn unit_scale_reports_thousands() {
    let report = json(&run_on_triangle(&["fit", "--scale", "1", "--variant", "A"]));
    let models = report["results"]["models"].as_array().unwrap();
    assert_eq!(models[0]["model"], "A");
    let reserve = models[0]["reserve"].as_f64().unwrap();
    assert!((reserve - 28_655.773).abs() < 1e-3, "{reserve}");
    assert_eq!(models.last().unwrap()["model"], "Mack");
}

#[test]
fn report_envelope() {
    let report = json(&run_on_triangle(&["fit", "--scale", "1000", "--seed", "9"]));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["command"], "fit");
    assert_eq!(report["config"]["scale"], 1000.0);
    let provenance = &report["provenance"];
    assert_eq!(provenance["seed"], 9);
    assert_eq!(provenance["threads"], 1);
    assert!(provenance["version"].is_string());
    assert!(provenance["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    let names: Vec<&str> = report["results"]["models"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["model"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["A", "B", "Mack"]);
}

#[test]
fn csv_output_has_header() {
    let out = run_on_triangle(&["fit", "--scale", "1000", "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,reserve,msep,sqrt_msep,dispersion"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn single_replicate_simulation() {
    let report = json(&run_on_triangle(&[
        "simulate", "--scale", "1000", "--theta", "10", "--replicates", "1", "--variant", "D",
    ]));
    let sweep = report["results"]["sweep"].as_array().unwrap();
    assert_eq!(sweep.len(), 1);
    assert_eq!(sweep[0]["records"].as_array().unwrap().len(), 1);
    assert_eq!(sweep[0]["sd_msep"], 0.0);
    assert!(report["results"]["crossover_payments"].is_null());
}

#[test]
fn outputs_go_to_files() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let figure_path = dir.path().join("figure.csv");
    let out = run_on_triangle(&[
        "simulate",
        "--scale",
        "1000",
        "--theta",
        "25,50",
        "--replicates",
        "4",
        "--out",
        report_path.to_str().unwrap(),
        "--figure-out",
        figure_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["command"], "simulate");
    let figure = std::fs::read_to_string(&figure_path).unwrap();
    assert!(figure.starts_with("variant,theta,expected_payments"));
    assert_eq!(figure.lines().count(), 3);
}

#[test]
fn split_emits_payments() {
    let out = run_on_triangle(&[
        "split", "--scale", "1000", "--theta", "5", "--variant", "G", "--format", "csv",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("origin,dev,claim,amount,covariate"));
    assert!(text.lines().count() > 55);
}

#[test]
fn identical_runs_are_identical() {
    let args = ["lrt", "--scale", "1000", "--replicates", "2", "--bootstrap", "10", "--format", "csv"];
    let a = run_on_triangle(&args);
    let b = run_on_triangle(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}
