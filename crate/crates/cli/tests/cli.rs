use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poisson-trick")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn yogurt_short() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/yogurt_short.csv").to_string()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn estimates(report: &Value) -> Vec<(String, f64)> {
    report["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c["estimate"].as_f64().unwrap()))
        .collect()
}

const TABLE1: &str = "Obs,X1,X2,Y1,Y2,Y3\n1,0,0,3,5,2\n2,0,1,5,5,0\n3,1,0,7,2,1\n4,1,1,1,3,6\n";

#[test]
fn convert_short_to_long_table() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let out = run(&["convert", "--data", input.to_str().unwrap(), "--from", "short", "--to", "long", "--obs", "Obs", "--categories", "Y1,Y2,Y3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "Obs,category,count,X1,X2");
    assert_eq!(&lines[1..4], &["1,Y1,3,0,0", "1,Y2,5,0,0", "1,Y3,2,0,0"]);
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[12], "4,Y3,6,1,1");
}

#[test]
fn convert_round_trip() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let long = dir.path().join("long.csv");
    let short = dir.path().join("short.csv");
    let out = run(&["convert", "--data", input.to_str().unwrap(), "--obs", "Obs", "--categories", "Y1,Y2,Y3", "--to", "long", "--output", long.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&["convert", "--data", long.to_str().unwrap(), "--obs", "Obs", "--category", "category", "--count", "count", "--to", "short", "--output", short.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(short).unwrap(), TABLE1);
}

#[test]
fn fit_fixed_table1_report() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let out = run(&["fit-fixed", "--data", input.to_str().unwrap(), "--obs", "Obs", "--categories", "Y1,Y2,Y3", "--covariate", "X1", "--covariate", "X2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["# loglik: ", "# iterations: ", "# tol: ", "# converged: true", "parameter,estimate,std_error,z"] {
        assert!(text.contains(key), "missing `{key}` in\n{text}");
    }
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 7);
}

fn simulate_grouped(dir: &TempDir, beta: Option<&str>) -> PathBuf {
    let path = dir.path().join("sim.csv");
    let mut args = vec![
        "simulate", "--groups", "40", "--obs-per-group", "5", "--n-categories", "3", "--variable", "x:normal",
        "--covariate", "x", "--gamma", "0.3,-0.2,0.5,-0.4", "--delta", "3", "--seed", "11", "--output",
        path.to_str().unwrap(),
    ];
    if let Some(b) = beta {
        args.extend(["--beta", b]);
    }
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn long_args(path: &Path) -> Vec<String> {
    ["--data", path.to_str().unwrap(), "--group", "group", "--obs", "obs", "--category", "category", "--count", "count", "--covariate", "x"]
        .map(String::from)
        .to_vec()
}

#[test]
fn fixed_beta_reduces_to_fixed_effects() {
    let dir = TempDir::new().unwrap();
    let data = simulate_grouped(&dir, None);
    let (fixed, gp) = (dir.path().join("fixed.json"), dir.path().join("gp.json"));
    let mut a = vec!["fit-fixed".to_string()];
    a.extend(long_args(&data));
    a.extend(["--output-format", "json", "--output", fixed.to_str().unwrap()].map(String::from));
    let out = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut a = vec!["fit-gp".to_string()];
    a.extend(long_args(&data));
    a.extend(["--fix-beta", "1e-8", "--output-format", "json", "--output", gp.to_str().unwrap()].map(String::from));
    let out = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (f, g) = (estimates(&json(&fixed)), estimates(&json(&gp)));
    assert_eq!(f.len(), 4);
    for ((nf, vf), (ng, vg)) in f.iter().zip(&g) {
        assert_eq!(nf, ng);
        assert!((vf - vg).abs() < 1e-3, "{nf}: {vf} vs {vg}");
    }
    let gp = json(&gp);
    assert!(gp["variances"].as_array().unwrap().iter().all(|v| v["fixed"] == Value::Bool(true)));
}

#[test]
fn json_output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = simulate_grouped(&dir, Some("0.5,1.0"));
    let other = TempDir::new().unwrap();
    let again = simulate_grouped(&other, Some("0.5,1.0"));
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());
    let mut outputs = Vec::new();
    for threads in ["1", "1", "2"] {
        let mut a = vec!["fit-gp".to_string(), "--threads".into(), threads.into()];
        a.extend(long_args(&data));
        a.extend(["--output-format", "json"].map(String::from));
        let out = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push(out.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let report: Value = serde_json::from_slice(&outputs[0]).unwrap();
    for key in ["loglik", "iterations", "tol", "converged"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn non_convergence_exits_3_with_partial_output() {
    let dir = TempDir::new().unwrap();
    let data = simulate_grouped(&dir, Some("0.5,1.0"));
    let report = dir.path().join("gp.json");
    let mut a = vec!["fit-gp".to_string()];
    a.extend(long_args(&data));
    a.extend(["--max-iter", "2", "--output-format", "json", "--output", report.to_str().unwrap()].map(String::from));
    let out = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).lines().any(|l| l.starts_with("error[non-convergence]:")), "{}", stderr(&out));
    let r = json(&report);
    assert_eq!(r["converged"], Value::Bool(false));
    assert_eq!(r["iterations"], Value::from(2));
}

#[test]
fn validation_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "t1.csv", TABLE1);
    let path = input.to_str().unwrap();

    let out = run(&["fit-fixed", "--data", path, "--categories", "Y1,Y2,Y9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error[schema]:"), "{}", stderr(&out));

    let negative = write(&dir, "neg.csv", "a,b\n1,-2\n");
    let out = run(&["fit-fixed", "--data", negative.to_str().unwrap(), "--categories", "a,b"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error[validation]:"));

    let out = run(&["fit-fixed", "--data", path, "--categories", "Y1,Y2,Y3", "--tol", "-1"]);
    assert_eq!(code(&out), 2);

    let out = run(&["fit-fixed", "--data", path, "--categories", "Y1,Y2,Y3", "--bogus"]);
    assert_eq!(code(&out), 2);

    // no group column: the random-effects model is not defined
    let out = run(&["fit-gp", "--data", path, "--obs", "Obs", "--categories", "Y1,Y2,Y3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).starts_with("error[spec]:"));
}

#[test]
fn verify_passes_on_simulated_data() {
    let dir = TempDir::new().unwrap();
    let data = simulate_grouped(&dir, Some("0.5,1.0"));
    let mut a = vec!["verify".to_string()];
    a.extend(long_args(&data));
    let out = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("# passed: true"));
    assert_eq!(text.matches(",pass").count(), 6, "{text}");
}

#[test]
fn predict_emits_fitted_values_and_effects() {
    let dir = TempDir::new().unwrap();
    let data = simulate_grouped(&dir, Some("0.5,1.0"));
    let mut a = vec!["predict".to_string(), "--no-se".into()];
    a.extend(long_args(&data));
    let out = run(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> =
        text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 40 * 5 * 3);
    for r in &rows {
        assert!(r[4].parse::<f64>().unwrap() >= 0.0);
        if r[2] == "1" {
            assert_eq!(r[5], "1");
        }
    }
}

/// Yogurt in long layout with brand as the category column.
#[test]
fn yogurt_gamma_poisson_table() {
    let dir = TempDir::new().unwrap();
    let long = dir.path().join("yogurt_long.csv");
    let out = run(&[
        "convert", "--data", &yogurt_short(), "--group", "id", "--obs", "obs", "--categories",
        "hiland,dannon,weight,yoplait", "--to", "long", "--output", long.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = dir.path().join("gp.json");
    let out = run(&[
        "fit-gp", "--data", long.to_str().unwrap(), "--group", "id", "--obs", "obs", "--category", "category",
        "--count", "count", "--covariate", "price:generic", "--covariate", "feature:generic", "--baseline",
        "hiland", "--no-se", "--output-format", "json", "--output", report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&report);
    let got = estimates(&r);
    let lookup = |n: &str| got.iter().find(|(m, _)| m == n).unwrap().1;
    for (name, v) in [("Cdannon", 4.616), ("Cweight", 3.677), ("Cyoplait", 5.275), ("feature", 0.785), ("price", -40.881)] {
        assert!(((lookup(name) - v) / v).abs() < 0.02, "{name}: {} vs {v}", lookup(name));
    }
    let betas: Vec<f64> = r["variances"].as_array().unwrap().iter().map(|v| v["beta"].as_f64().unwrap()).collect();
    for (b, v) in betas.iter().zip([2.203, 6.067, 1.918]) {
        assert!(((b - v) / v).abs() < 0.02, "{b} vs {v}");
    }
}
