use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pi-certify"))
}

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
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

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_toy_converges_fast() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--problem", s(&asset("toy3.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pirun = json(&dir.path().join("pirun.json"));
    assert!(pirun["converged_at"].as_u64().unwrap() <= 3);
    let residuals = pirun["bellman_residuals"].as_array().unwrap();
    assert!(residuals.last().unwrap().as_f64().unwrap() <= 1e-10);
    // hand-enumerated optimum
    let values = std::fs::read_to_string(dir.path().join("values.csv")).unwrap();
    let v: Vec<f64> = values.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(v.len(), 3);
    for (a, b) in v.iter().zip([0.0, 1.0, 2.9]) {
        assert!((a - b).abs() < 1e-12, "{v:?}");
    }
    assert!(dir.path().join("policy.csv").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--problem", s(&asset("toy3.json")), "--gamma", "1.0", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    let o = run(&["solve", "--problem", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.json"));
    let o = run(&["reproduce", "pendulum", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .args(["solve", "--problem", s(&asset("toy3.json")), "--out", s(dir.path())])
        .env("PI_CERTIFY_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn certify_flags_out_of_range_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["certify", "--problem", s(&asset("toy3.json")), "--gamma-sweep", "0.6,0.9,4", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = json(&dir.path().join("certificates.json"));
    let rows = b["sweep"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r["in_range"] == Value::Bool(false)));
}

#[test]
fn certify_nonholonomic_constants() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["certify", "--problem", s(&asset("nonholonomic.json")), "--grid-points", "11", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = json(&dir.path().join("certificates.json"));
    assert!((b["gamma0"].as_f64().unwrap() - 225.0 / 256.0).abs() < 1e-12);
    assert!((b["gamma_star"].as_f64().unwrap() - 17.0 / 22.0).abs() < 1e-12);
    assert!(stdout(&o).contains("gamma=0.86, i*=20"));
}

#[test]
fn verify_certified_toy_passes_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["verify", "--problem", s(&asset("toy3.json")), "--gamma", "0.35", "--out", s(d.path())]);
        assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    }
    for f in ["report.json", "report.csv", "plotdata/bound_vs_i.csv", "plotdata/sigma_vs_k.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let r = json(&a.path().join("report.json"));
    for c in r["checks"].as_array().unwrap() {
        assert!(c["worst_margin"].as_f64().unwrap() >= -1e-8, "{c}");
    }
}

#[test]
fn tampered_run_fails_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve", "--problem", s(&asset("toy3.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let path = dir.path().join("pirun.json");
    let mut pirun = json(&path);
    let v = &mut pirun["iterates"][1]["value"]["table"][1];
    *v = Value::from(v.as_f64().unwrap() + 100.0);
    std::fs::write(&path, serde_json::to_string(&pirun).unwrap()).unwrap();
    let o = run(&["verify", "--problem", s(&asset("toy3.json")), "--pirun", s(&path), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("FAIL lemma2-monotone"), "{out}");
    assert!(out.contains("witness"));
}

#[test]
fn corollary_below_threshold_is_informational() {
    let dir = tempfile::tempdir().unwrap();
    // i* = 3 at gamma = 0.7
    let o = run(&["verify", "--problem", s(&asset("lq2.json")), "--iteration", "2", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = json(&dir.path().join("report.json"));
    let env = r["checks"].as_array().unwrap().iter().find(|c| c["kind"] == "cor1-envelope").unwrap();
    assert_eq!(env["informational"], Value::Bool(true));
    assert_eq!(env["iteration"], Value::from(2));
}

#[test]
fn reproduce_lq_agrees_with_riccati() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["reproduce", "lq", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("(agree)"));
    assert!(out.contains("ok   schur"));
    let b = json(&dir.path().join("certificates.json"));
    assert_eq!(b["sweep"].as_array().unwrap().len(), 21);
}

#[test]
fn reproduce_nonholonomic_prints_threshold_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["reproduce", "nonholonomic", "--grid-points", "11", "--out", s(dir.path())]);
    let out = stdout(&o);
    assert!(out.contains("gamma=0.86, i*=20"), "{out}");
    assert!(dir.path().join("report.json").exists());
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("0.86,true,true,20,"), "{summary}");
}
