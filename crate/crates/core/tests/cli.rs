mod common;

use std::path::Path;
use std::process::{Command, Output};

use voluntary_el::population::Scenario;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voluntary-el"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(csv: &str, method: &str, column: usize) -> f64 {
    csv.lines()
        .find(|l| l.starts_with(&format!("{method},")))
        .unwrap_or_else(|| panic!("no {method} row in {csv}"))
        .split(',')
        .nth(column)
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn estimate_on_an_exported_population_is_close_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m1.csv");
    common::scenario_frame(Scenario::M1, 5000, 404)
        .save_csv(&path)
        .unwrap();
    let out = run(&["estimate", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(
        text.lines().next(),
        Some("method,theta,variance,ci_lo,ci_hi")
    );
    let theta = field(&text, "EL-2", 1);
    let v = field(&text, "EL-2", 2);
    assert!(theta.abs() <= 3.0 * v.sqrt(), "θ̂ = {theta}, V̂ = {v}");
    let (lo, hi) = (field(&text, "EL-2", 3), field(&text, "EL-2", 4));
    assert!(lo < theta && theta < hi);
}

#[test]
fn estimate_json_carries_the_fitted_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m2.csv");
    common::scenario_frame(Scenario::M2, 2000, 405)
        .save_csv(&path)
        .unwrap();
    let out = run(&[
        "estimate",
        path.to_str().unwrap(),
        "--format",
        "json",
        "--estimators",
        "ps,el2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["n_units"], 2000);
    assert_eq!(v["phi"].as_array().unwrap().len(), 3);
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn census_input_is_rejected_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "all.csv",
        "x1,x2,delta,y\n1,2,1,0.5\n2,1,1,0.1\n3,3,1,1.2\n",
    );
    let out = run(&["estimate", &path]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_outcome_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "gap.csv",
        "x1,x2,delta,y\n1,2,1,0.5\n2,1,0,\n3,3,1,\n",
    );
    let out = run(&["estimate", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 3"), "{}", stderr(&out));
}

#[test]
fn oracle_estimators_are_refused_on_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m1.csv");
    common::scenario_frame(Scenario::M1, 500, 406)
        .save_csv(&path)
        .unwrap();
    let out = run(&["estimate", path.to_str().unwrap(), "--estimators", "full"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_prints_the_summary_table() {
    let out = run(&[
        "simulate",
        "--n",
        "500",
        "--reps",
        "4",
        "--seed",
        "3",
        "--workers",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("scenario,method,bias,var_x1000,mse_x1000,mean_vhat_x1000,coverage,failures")
    );
    let methods: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(methods, ["Full", "EL (MAR)", "PS", "EL-1", "EL-2"]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "mc.toml",
        "scenario = \"m1\"\nn_units = 400\nreplications = 3\nseed = 9\nestimators = [\"ps\"]\n",
    );
    let base = run(&["simulate", "--config", &cfg]);
    assert!(base.status.success(), "{}", stderr(&base));
    assert!(stdout(&base).lines().nth(1).unwrap().starts_with("M1,PS,"));
    let over = run(&["simulate", "--config", &cfg, "--scenario", "m2"]);
    assert!(over.status.success(), "{}", stderr(&over));
    assert!(stdout(&over).lines().nth(1).unwrap().starts_with("M2,PS,"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "replicates = 10\n");
    assert_eq!(run(&["simulate", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn zero_level_intervals_never_cover() {
    let out = run(&[
        "coverage",
        "--n",
        "400",
        "--reps",
        "3",
        "--seed",
        "5",
        "--ci-level",
        "0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "EL-2");
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn output_file_receives_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("cov.json");
    let out = run(&[
        "coverage",
        "--n",
        "400",
        "--reps",
        "2",
        "--seed",
        "5",
        "--format",
        "json",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(v["replications"], 2);
}
