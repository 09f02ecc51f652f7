//! Exit-code contract and output determinism of the `dsm` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsm")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const LINEAR: &str = r#"{"problem": {"name": "linear", "matrix": [[1]], "solution": [0]},
  "flow": {"kind": "modified_newton", "x0": [1]},
  "integrator": {"t_max": 10, "record_every": 0.5}}"#;

const REGULARIZED: &str = r#"{"problem": {"name": "polynomial", "beta": 1.0},
  "flow": {"kind": "regularized_modified_newton", "x0": [0.01],
           "schedule": {"kind": "exponential", "a": 1.0, "b": 0.1}},
  "integrator": {"t_max": 60, "record_every": 0.5}}"#;

#[test]
fn solve_linear_modified_newton_exits_zero_with_monotone_residual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", LINEAR);
    let out = dir.path().join("o");
    let o = dsm(&["solve", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,res_norm,err_norm,eps,b_norm,w_norm,bound_res,bound_err");
    let res: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(res.len(), 21);
    assert!(res.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.join("certificate.txt").exists() && out.join("bounds.txt").exists());
}

#[test]
fn solve_inverse_free_with_zero_operator_exits_two_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let text = LINEAR.replace("modified_newton", "inverse_free").replace(r#""x0": [1]"#, r#""x0": [1], "b0": "zero""#);
    let cfg = write_config(dir.path(), "c.json", &text);
    let out = dir.path().join("o");
    let o = dsm(&["solve", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(out.join("trajectory.csv").exists());
    let bounds = fs::read_to_string(out.join("bounds.txt")).unwrap();
    assert!(bounds.contains("uncertified; bounds informational"));
    assert!(stdout(&o).contains("initial_defect: LHS=0.0 RHS=0.0"));
}

#[test]
fn unknown_problem_name_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &LINEAR.replace("\"linear\"", "\"quartic\""));
    for cmd in ["solve", "check", "sweep"] {
        let o = dsm(&[cmd, &cfg, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code(&o), 1, "{cmd}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("problem") && err.contains("quartic"), "{err}");
    }
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", "{\n  \"problem\": {\"name\": \"linear\",\n  \"matrix\": oops}");
    let o = dsm(&["check", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn check_regularized_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", REGULARIZED);
    let o = dsm(&["check", &cfg]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    for name in [
        "schedule_positive",
        "schedule_decreasing",
        "schedule_rate_ratio_nondecreasing",
        "schedule_initial_dominance",
        "nonnegativity",
        "anchor_within_radius",
        "source_inequality",
    ] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name}: LHS=")) && l.ends_with("[PASS]")), "{name}");
    }

    let bad = write_config(dir.path(), "bad.json", &REGULARIZED.replace("\"b\": 0.1", "\"b\": 2.0"));
    let o = dsm(&["check", &bad]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("schedule_initial_dominance:") && l.ends_with("[FAIL]")));
}

#[test]
fn linear_problem_checks_degenerate_for_every_flow() {
    let dir = tempfile::tempdir().unwrap();
    let flows = [
        r#""kind": "modified_newton""#,
        r#""kind": "newton""#,
        r#""kind": "simple_iteration""#,
        r#""kind": "gradient""#,
        r#""kind": "gauss_newton""#,
        r#""kind": "inverse_free", "b0": "exact_inverse""#,
        r#""kind": "regularized_modified_newton", "schedule": {"kind": "exponential", "a": 1.0, "b": 0.1}"#,
    ];
    for (k, flow) in flows.iter().enumerate() {
        let text = format!(
            r#"{{"problem": {{"name": "linear", "matrix": [[2, 0.5], [0, 1]], "solution": [0.2, -0.1]}},
                "flow": {{{flow}, "x0": [0.3, 0.1]}},
                "integrator": {{"t_max": 1, "record_every": 0.5}}}}"#
        );
        let cfg = write_config(dir.path(), &format!("c{k}.json"), &text);
        let o = dsm(&["check", &cfg]);
        assert_eq!(code(&o), 3, "{flow}\n{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn identical_runs_are_byte_identical_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    let text = REGULARIZED
        .replace(r#""beta": 1.0"#, r#""beta": 1.0, "dim": 3"#)
        .replace("[0.01]", r#"{"constant": 0.01}"#)
        .replace(r#""integrator""#, r#""noise": {"delta": 0.0001}, "integrator""#);
    let cfg = write_config(dir.path(), "c.json", &text);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = dsm(&["solve", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        fs::read(out.join("trajectory.csv")).unwrap()
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn sweep_contract() {
    let dir = tempfile::tempdir().unwrap();
    let text = REGULARIZED.replace(
        r#""integrator""#,
        r#""noise": {"delta": 0.01, "seed": 4},
           "sweep": [{"noise": {"delta": 0.01}}, {"noise": {"delta": 0.001}}, {"noise": {"delta": 0.0001}},
                     {"noise": {"delta": 0.00005}}],
           "integrator""#,
    );
    let cfg = write_config(dir.path(), "c.json", &text);
    let out = dir.path().join("s");
    let o = dsm(&["sweep", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let summary = fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    let rows: Vec<Vec<String>> = summary.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(summary.lines().next().unwrap(), "delta,tau,err_at_tau,bound_c4,certified,violated");
    assert_eq!(rows.len(), 4);
    let num = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
    for r in &rows {
        assert!(num(r, 2) <= num(r, 3), "{r:?}");
        assert_eq!((r[4].as_str(), r[5].as_str()), ("true", "false"));
    }
    assert!(num(&rows[2], 2) <= num(&rows[1], 2) && num(&rows[1], 2) <= num(&rows[0], 2));
    let ratio = num(&rows[2], 3) / num(&rows[3], 3);
    assert!((ratio - 2f64.sqrt()).abs() < 1e-12);

    let empty = write_config(dir.path(), "e.json", &REGULARIZED.replace(r#""integrator""#, r#""sweep": [], "integrator""#));
    assert_eq!(code(&dsm(&["sweep", &empty, "--out", out.to_str().unwrap()])), 1);
}
