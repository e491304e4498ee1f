#![allow(dead_code)]

use std::io::Write;

use poisson_trick::data::{ingest_csv, Dataset, Format, Schema};
use poisson_trick::design::{ModelSpec, Term};
use poisson_trick::oracle::{SimCovariate, SimulationConfig};

pub fn yogurt() -> Dataset {
    let schema = Schema {
        group: Some("id".into()),
        obs: Some("obs".into()),
        categories: ["hiland", "dannon", "weight", "yoplait"].map(String::from).to_vec(),
        ..Schema::default()
    };
    ingest_csv(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/yogurt_short.csv"), Format::Short, &schema).unwrap()
}

/// Brand intercepts plus generic feature and price slopes.
pub fn yogurt_spec() -> ModelSpec {
    ModelSpec::new(vec![Term::generic("feature"), Term::generic("price")])
}

/// Grouped data with one category-specific normal covariate `x`.
pub fn grouped_config(groups: usize, per_group: usize, q: usize, beta: Option<Vec<f64>>, seed: u64) -> SimulationConfig {
    let mut cfg = SimulationConfig::new(groups, per_group, q, seed);
    cfg.covariates = vec![SimCovariate::normal("x", 0.0, 1.0)];
    cfg.spec = ModelSpec::new(vec![Term::specific("x")]);
    let pattern = [0.3, -0.2, 0.5, -0.4, 0.1, 0.25];
    cfg.gamma = (0..2 * (q - 1)).map(|k| pattern[k % pattern.len()]).collect();
    cfg.beta = beta;
    cfg.delta = 3.0;
    cfg
}

/// One line per criterion, written past the test harness's output capture.
pub fn report(criterion: &str, ok: bool, detail: &str) {
    let line = format!("[{}] criterion {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
