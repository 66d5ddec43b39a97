use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lattice_llr::experiment::run_experiment_with_threads;
use lattice_llr::LatticeField;
use lattice_llr_cli::{experiment_outputs, load_config};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lattice-llr"));
    c.env_remove("LATTICE_LLR_THREADS");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const MODEL1_CONFIG: &str = r#"{"model": {"kind": "model1", "m": 10, "n": 20}, "replications": 4, "grid": "-2:2:21", "base_seed": 5}"#;

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["simulate", "--model", "model1", "--m", "10", "--n", "20", "--seed", "42", "--out", "field.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let field = LatticeField::read_csv(dir.path().join("field.csv")).unwrap();
    assert_eq!(field.len(), 200);
    assert_eq!(field.shape().dims(), &[10, 20]);

    let o = run_in(
        dir.path(),
        &["estimate", "--in", "field.csv", "--bandwidth", "0.5", "--kernel", "epanechnikov", "--grid", "-2:2:101", "--out", "curve.csv"],
    );
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,g_hat,grad_1,rcond,support_count,status");
    assert_eq!(lines.len(), 102);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 6);
    }
}

#[test]
fn model2_preset_and_two_dimensional_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["simulate", "--model", "model2", "--preset", "xe", "--m", "6", "--n", "7", "--out", "f.csv"]);
    assert_eq!(code(&o), 0);
    let o = run_in(dir.path(), &["simulate", "--model", "model2", "--m", "6", "--n", "7", "--out", "g.csv"]);
    assert_eq!(code(&o), 1, "model2 without a preset is a usage error");

    fs::write(
        dir.path().join("d2.csv"),
        "i1,i2,y,x1,x2\n1,1,1,0,0\n1,2,2,1,0\n2,1,3,0,1\n2,2,5,1,1\n",
    )
    .unwrap();
    let o = run_in(dir.path(), &["estimate", "--in", "d2.csv", "--bandwidth", "5", "--kernel", "gaussian", "--grid", "0:1:3", "--out", "c.csv"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(text.starts_with("x1,x2,g_hat,grad_1,grad_2,rcond,support_count,status\n"));
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&run_in(p, &["--help"])), 0);
    assert_eq!(code(&run_in(p, &["frobnicate"])), 1);
    assert_eq!(code(&run_in(p, &["simulate", "--model", "model1"])), 1);
    assert_eq!(code(&run_in(p, &["estimate", "--in", "x.csv", "--bandwidth", "0.5", "--grid", "2:1:5", "--out", "o.csv"])), 1);
    assert_eq!(code(&run_in(p, &["estimate", "--in", "x.csv", "--bandwidth", "0", "--grid", "0:1:5", "--out", "o.csv"])), 1);
    assert_eq!(code(&run_in(p, &["estimate", "--in", "missing.csv", "--bandwidth", "0.5", "--grid", "0:1:5", "--out", "o.csv"])), 2);

    fs::write(p.join("holes.csv"), "i1,i2,y,x1\n1,1,1.0,0.0\n2,2,1.0,0.5\n").unwrap();
    let o = run_in(p, &["estimate", "--in", "holes.csv", "--bandwidth", "0.5", "--grid", "0:1:5", "--out", "o.csv"]);
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    fs::write(p.join("ok.csv"), "i1,y,x1\n1,1.0,0.0\n2,2.0,0.5\n3,0.0,1.0\n").unwrap();
    let o = run_in(p, &["estimate", "--in", "ok.csv", "--bandwidth", "0.1", "--kernel", "uniform", "--grid", "5:6:4", "--out", "o.csv"]);
    assert_eq!(code(&o), 3);
    let text = fs::read_to_string(p.join("o.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",empty")));

    fs::write(p.join("typo.json"), r#"{"model": {"kind": "model1", "m": 4, "n": 4}, "replicatons": 3}"#).unwrap();
    assert_eq!(code(&run_in(p, &["experiment", "--config", "typo.json", "--out-dir", "r"])), 2);
    fs::write(p.join("exp.json"), MODEL1_CONFIG).unwrap();
    assert_eq!(code(&run_in(p, &["diagnose", "--config", "exp.json", "--out", "d.json"])), 2);
    let o = bin().current_dir(p).env("LATTICE_LLR_THREADS", "many").args(["experiment", "--config", "exp.json", "--out-dir", "r"]).output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn experiment_files_match_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("exp.json"), MODEL1_CONFIG).unwrap();
    let o = run_in(p, &["experiment", "--config", "exp.json", "--out-dir", "results"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let (file, cfg) = load_config(&p.join("exp.json")).unwrap();
    let result = run_experiment_with_threads(&cfg, 1).unwrap();
    let expected = experiment_outputs(&file, &cfg, &result);
    let mut names: Vec<String> = fs::read_dir(p.join("results")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["curves.csv", "nsr.csv", "scatter.csv", "summary.csv", "summary.json"]);
    for (name, text) in expected {
        assert_eq!(fs::read_to_string(p.join("results").join(name)).unwrap(), text, "{name}");
    }
}

#[test]
fn output_paths_do_not_change_content() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::create_dir(p.join("sub")).unwrap();
    for out in ["a.csv", "sub/b.csv"] {
        let o = run_in(p, &["simulate", "--model", "model2", "--preset", "xc", "--m", "5", "--n", "6", "--seed", "9", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("sub/b.csv")).unwrap());
    let o = run_in(p, &["simulate", "--model", "model2", "--preset", "xc", "--m", "5", "--n", "6", "--seed", "10", "--out", "c.csv"]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("c.csv")).unwrap());
}

#[test]
fn asymptotics_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run_in(p, &["asymptotics", "--truth", "iid", "--grid", "-0.5:0.5:3", "--out", "a.csv"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(p.join("a.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(2).unwrap().split(',').take(5).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.0);
    assert!((row[2] - 1.0).abs() < 1e-9);
    assert!((row[3] - 1.0 / (2.0 * std::f64::consts::PI.sqrt()) / 0.5).abs() < 1e-9);

    let o = run_in(p, &["asymptotics", "--truth", "iid", "--boundary-c", "1", "--kernel", "epanechnikov", "--out", "b.csv"]);
    assert_eq!(code(&o), 0);
    let o = run_in(p, &["asymptotics", "--truth", "iid", "--grid", "3:4:2", "--out", "z.csv"]);
    assert_eq!(code(&o), 3);
    let o = run_in(p, &["asymptotics", "--truth", "model1", "--out", "m.csv"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn diagnose_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("d.json"),
        r#"{"model": {"kind": "iid", "m": 20, "n": 20, "noise_sd": 0.5}, "replications": 40, "bandwidth": 0.3, "base_seed": 2}"#,
    )
    .unwrap();
    let o = run_in(p, &["diagnose", "--config", "d.json", "--out", "r.json", "--draws", "draws.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(v["successes"], 40);
    assert!(v["ks_stat"].as_f64().unwrap() > 0.0);
    assert_eq!(fs::read_to_string(p.join("draws.csv")).unwrap().lines().count(), 41);

    fs::write(p.join("few.json"), r#"{"model": {"kind": "iid", "m": 20, "n": 20}, "replications": 5}"#).unwrap();
    assert_eq!(code(&run_in(p, &["diagnose", "--config", "few.json", "--out", "r2.json"])), 3);
}

#[test]
fn no_temporary_files_left_behind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("exp.json"), MODEL1_CONFIG).unwrap();
    assert_eq!(code(&run_in(p, &["experiment", "--config", "exp.json", "--out-dir", "."])), 0);
    let n = fs::read_dir(p).unwrap().count();
    assert_eq!(n, 6, "exp.json plus five outputs");
}
