//! End-to-end checks of the command-line surface: exit codes, file
//! ingestion rules, and the shape of every artifact the tool writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nsl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nsl"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn write_csv(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Small deterministic data files: 12 rows, 3 predictors, 4 covariates.
fn write_toy_data(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let y = dir.join("y.csv");
    let x = dir.join("x.csv");
    let w = dir.join("w.csv");
    let mut xs = String::from("x1,x2,x3\n");
    let mut ws = String::from("w1,w2,w3,w4\n");
    let mut ys = String::from("y\n");
    for i in 0..12 {
        let t = i as f64;
        let a = (t * 0.7).sin();
        let b = (t * 0.3).cos();
        let c = (t * 1.3).sin() * 0.5;
        let d = (t * 0.9).cos() * 0.8;
        xs.push_str(&format!("{a},{b},{c}\n"));
        ws.push_str(&format!("{b},{c},{d},{a}\n"));
        ys.push_str(&format!("{}\n", 2.0 * a - b + 0.05 * d));
    }
    write_csv(&y, &ys);
    write_csv(&x, &xs);
    write_csv(&w, &ws);
    (y, x, w)
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(nsl().args(["fit", "--predictors", "x.csv", "--covariates", "w.csv"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(nsl().args(["simulate", "--example", "1", "--frobnicate"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_example_value_is_a_usage_error() {
    let out = run(nsl().args(["simulate", "--example", "3"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_csv_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (y, x, w) = write_toy_data(dir.path());
    write_csv(&x, "x1,x2\n1.0,\n2.0,3.0\n"); // blank field
    let out = run(nsl().args([
        "fit",
        "--response",
        y.to_str().unwrap(),
        "--predictors",
        x.to_str().unwrap(),
        "--covariates",
        w.to_str().unwrap(),
        "--factors",
        "2",
        "--penalty",
        "hard",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn row_count_mismatch_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (y, x, w) = write_toy_data(dir.path());
    write_csv(&y, "y\n1.0\n2.0\n");
    let out = run(nsl().args([
        "fit",
        "--response",
        y.to_str().unwrap(),
        "--predictors",
        x.to_str().unwrap(),
        "--covariates",
        w.to_str().unwrap(),
        "--factors",
        "2",
        "--penalty",
        "hard",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_writes_coefficients_for_every_column_and_factor() {
    let dir = tempfile::tempdir().unwrap();
    let (y, x, w) = write_toy_data(dir.path());
    let coefs = dir.path().join("coefs.csv");
    let fit_json = dir.path().join("fit.json");
    let out = run(nsl().args([
        "fit",
        "--response",
        y.to_str().unwrap(),
        "--predictors",
        x.to_str().unwrap(),
        "--covariates",
        w.to_str().unwrap(),
        "--factors",
        "2",
        "--penalty",
        "hard",
        "--grid-size",
        "20",
        "--output",
        fit_json.to_str().unwrap(),
        "--coefficients",
        coefs.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let table = fs::read_to_string(&coefs).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "name,value,standardized_value,in_support");
    assert_eq!(lines.len(), 1 + 3 + 2, "p + K coefficient rows");
    assert!(lines[1].starts_with("x1,"));
    assert!(lines[4].starts_with("factor_1,"));

    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fit_json).unwrap()).unwrap();
    assert!(parsed["lambda_selected"].as_f64().is_some());
    assert!(parsed["sigma_hat"].as_f64().unwrap() >= 0.0);
    assert_eq!(parsed["metadata"]["seed"].as_u64(), Some(12345));
    assert_eq!(parsed["beta"].as_array().unwrap().len(), 3);
    assert_eq!(parsed["gamma"].as_array().unwrap().len(), 2);
}

#[test]
fn config_file_values_lose_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"reps": 200, "seed": 9}"#).unwrap();
    let report = dir.path().join("report.json");
    // tiny overridden study: flag reps=2 must beat config reps=200
    let out = run(nsl().args([
        "--config",
        config.to_str().unwrap(),
        "simulate",
        "--example",
        "1",
        "--reps",
        "2",
        "--n",
        "30",
        "--p",
        "48",
        "--factors",
        "3",
        "--test-size",
        "200",
        "--methods",
        "hard",
        "--models",
        "m2",
        "--grid-size",
        "15",
        "--output",
        report.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["metadata"]["config"]["spec"]["reps"].as_u64(), Some(2));
    // config seed was not overridden, so it wins over the default
    assert_eq!(parsed["metadata"]["seed"].as_u64(), Some(9));
    assert_eq!(parsed["summary"]["reps_completed"].as_u64(), Some(2));
}

#[test]
fn report_subcommand_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = run(nsl().args([
        "simulate",
        "--example",
        "1",
        "--reps",
        "2",
        "--n",
        "30",
        "--p",
        "48",
        "--factors",
        "3",
        "--test-size",
        "200",
        "--methods",
        "hard",
        "--models",
        "m2,oracle",
        "--grid-size",
        "15",
        "--seed",
        "4",
        "--output",
        report.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let ok = run(nsl().args(["report", "--input", report.to_str().unwrap()]));
    assert_eq!(ok.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("re-aggregation verified"));

    // tamper with a stored mean: verification must fail with an input error
    let text = fs::read_to_string(&report).unwrap();
    let mut parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    parsed["summary"]["rows"][0]["stats"]["pe"]["mean"] = serde_json::json!(123.456);
    fs::write(&report, serde_json::to_string_pretty(&parsed).unwrap()).unwrap();
    let bad = run(nsl().args(["report", "--input", report.to_str().unwrap()]));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn pca_writes_eigenvalues_and_angles() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, w) = write_toy_data(dir.path());
    let eigen = dir.path().join("eigen.csv");
    let angles = dir.path().join("angles.csv");
    let truth = dir.path().join("truth.csv");
    // first coordinate axis as the claimed population direction
    write_csv(&truth, "u1\n1.0\n0.0\n0.0\n0.0\n");
    let out = run(nsl().args([
        "pca",
        "--covariates",
        w.to_str().unwrap(),
        "--factors",
        "3",
        "--output",
        eigen.to_str().unwrap(),
        "--truth-directions",
        truth.to_str().unwrap(),
        "--angles",
        angles.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let eigen_text = fs::read_to_string(&eigen).unwrap();
    assert!(eigen_text.starts_with("index,eigenvalue,ratio_to_next,cumulative_fraction"));
    assert_eq!(eigen_text.lines().count(), 4);
    let angle_text = fs::read_to_string(&angles).unwrap();
    assert!(angle_text.starts_with("factor,direction_angle,score_angle"));
    assert_eq!(angle_text.lines().count(), 2);
}

#[test]
fn spark_flags_duplicate_columns() {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("design.csv");
    let mut text = String::from("a,b,c\n");
    for i in 0..10 {
        let v = (i as f64 * 0.37).sin() + 0.1;
        let u = (i as f64 * 0.91).cos() - 0.2;
        text.push_str(&format!("{v},{u},{v}\n")); // column c duplicates a
    }
    write_csv(&design, &text);
    let spark_json = dir.path().join("spark.json");
    let out = run(nsl().args([
        "spark",
        "--design",
        design.to_str().unwrap(),
        "--bound",
        "0.5",
        "--cap",
        "3",
        "--output",
        spark_json.to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&spark_json).unwrap()).unwrap();
    assert_eq!(parsed["display"].as_str(), Some("2"));

    let bad = run(nsl().args([
        "spark",
        "--design",
        design.to_str().unwrap(),
        "--bound",
        "1.5",
        "--cap",
        "3",
    ]));
    assert_eq!(bad.status.code(), Some(2));
}
