use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn philab(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_philab"))
        .args(args)
        .env("PHILAB_RUN_ROOT", root)
        .output()
        .expect("philab runs")
}

fn report(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is the report")
}

#[test]
fn enumerate_counts_default_dyck() {
    let dir = tempfile::tempdir().unwrap();
    let out = philab(dir.path(), &["enumerate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert_eq!(r["analytic"]["language_size"], 145);
    assert_eq!(r["command"], "enumerate");
    let run_dir = dir.path().join(format!("enumerate-{}", &r["config_hash"].as_str().unwrap()[..16]));
    assert!(run_dir.join("report.json").exists());
}

#[test]
fn budget_table_passes_audits_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = philab(dir.path(), &["budget", "--table"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&out);
    assert!(r["audits"].as_array().unwrap().iter().all(|a| a["passed"] == true));
    let run_dir = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let csv = std::fs::read_to_string(run_dir.join("budget.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn reruns_differ_only_in_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = report(&philab(dir.path(), &["cost"]));
    let mut b = report(&philab(dir.path(), &["cost"]));
    a["wall_clock_ms"] = Value::Null;
    b["wall_clock_ms"] = Value::Null;
    assert_eq!(a, b);
}

#[test]
fn report_replays_a_run_and_bad_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert!(philab(dir.path(), &["budget", "--n", "8", "--k", "4", "--p1", "0.6"]).status.success());
    let run_dir = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let out = philab(dir.path(), &["report", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(report(&out)["command"], "budget");

    let missing = philab(dir.path(), &["report", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"grammar":{"variant":"Dyck","depth":3,"length":8},"lm":{"variant":"Bernoulli","p1":0.5},"typo":1}"#).unwrap();
    assert_eq!(philab(dir.path(), &["gap", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}
