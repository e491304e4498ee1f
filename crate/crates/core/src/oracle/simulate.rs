//! Data generation from the Gamma-Poisson hierarchy.
//!
//! Covariates come from one ChaCha8 stream; each group then draws its random
//! effects and counts from its own stream (`seed`, stream i + 1), so the
//! output does not depend on how groups are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;

use crate::data::{Covariate, Dataset, LongRecord, Value};
use crate::design::{Encoder, ModelSpec};
use crate::error::{Error, Result};
use crate::oracle::distributions::poisson_draw;

#[derive(Debug, Clone, PartialEq)]
pub enum SimCovariateKind {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Levels `L0`, `L1`, … drawn uniformly.
    Categorical { levels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCovariate {
    pub name: String,
    pub kind: SimCovariateKind,
    /// Draw a separate value for every category (choice attributes).
    pub varies_by_category: bool,
}

impl SimCovariate {
    pub fn normal(name: impl Into<String>, mean: f64, sd: f64) -> Self {
        SimCovariate { name: name.into(), kind: SimCovariateKind::Normal { mean, sd }, varies_by_category: false }
    }

    pub fn categorical(name: impl Into<String>, levels: usize) -> Self {
        SimCovariate { name: name.into(), kind: SimCovariateKind::Categorical { levels }, varies_by_category: false }
    }

    pub fn per_category(mut self) -> Self {
        self.varies_by_category = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n_groups: usize,
    pub obs_per_group: usize,
    pub n_categories: usize,
    pub covariates: Vec<SimCovariate>,
    pub spec: ModelSpec,
    /// Structural coefficients in design-column order.
    pub gamma: Vec<f64>,
    /// Variances of the non-baseline random effects; `None` means λ ≡ 1.
    pub beta: Option<Vec<f64>>,
    /// Common observation constant δ_ij.
    pub delta: f64,
    pub seed: u64,
}

impl SimulationConfig {
    /// Intercept-only model with zero intercepts and no random effects.
    pub fn new(n_groups: usize, obs_per_group: usize, n_categories: usize, seed: u64) -> Self {
        SimulationConfig {
            n_groups,
            obs_per_group,
            n_categories,
            covariates: Vec::new(),
            spec: ModelSpec::new(vec![]),
            gamma: vec![0.0; n_categories.saturating_sub(1)],
            beta: None,
            delta: 1.0,
            seed,
        }
    }

    /// Names of the structural coefficients `gamma` must supply, in order.
    pub fn coefficient_names(&self) -> Result<Vec<String>> {
        let template = covariate_template(self)?;
        Ok(Encoder::new(&template, &self.spec)?.column_names().to_vec())
    }
}

fn draw_value<R: Rng>(kind: &SimCovariateKind, rng: &mut R) -> Value {
    match *kind {
        SimCovariateKind::Normal { mean, sd } => Value::Num(Normal::new(mean, sd).unwrap().sample(rng)),
        SimCovariateKind::Uniform { lo, hi } => Value::Num(rng.random_range(lo..hi)),
        SimCovariateKind::Categorical { levels } => Value::Level(rng.random_range(0..levels)),
    }
}

/// Covariates drawn from the main stream, with all counts zero.
fn covariate_template(cfg: &SimulationConfig) -> Result<Dataset> {
    let q = cfg.n_categories;
    if cfg.n_groups == 0 || cfg.obs_per_group == 0 {
        return Err(Error::Validation("simulation needs at least one group and observation".into()));
    }
    if !(cfg.delta > 0.0 && cfg.delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be positive, got {}", cfg.delta)));
    }
    if let Some(beta) = &cfg.beta {
        if beta.len() + 1 != q {
            return Err(Error::Validation(format!("expected {} variance parameters, got {}", q - 1, beta.len())));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::Domain(format!("variance parameters must be positive, got {b}")));
        }
    }
    for c in &cfg.covariates {
        if let SimCovariateKind::Categorical { levels } = c.kind {
            if levels < 2 {
                return Err(Error::Validation(format!("covariate `{}` needs at least 2 levels", c.name)));
            }
        }
    }

    let n_obs = cfg.n_groups * cfg.obs_per_group;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(n_obs * q);
    let mut obs_group = Vec::with_capacity(n_obs);
    for j in 0..n_obs {
        let g = j / cfg.obs_per_group;
        obs_group.push(g);
        let mut per_cat: Vec<Vec<Value>> = vec![Vec::with_capacity(cfg.covariates.len()); q];
        for c in &cfg.covariates {
            if c.varies_by_category {
                for vals in per_cat.iter_mut() {
                    vals.push(draw_value(&c.kind, &mut rng));
                }
            } else {
                let v = draw_value(&c.kind, &mut rng);
                per_cat.iter_mut().for_each(|vals| vals.push(v));
            }
        }
        for (category, values) in per_cat.into_iter().enumerate() {
            records.push(LongRecord { group: g, obs: j, category, count: 0, values });
        }
    }
    let covariates = cfg
        .covariates
        .iter()
        .map(|c| match c.kind {
            SimCovariateKind::Categorical { levels } => {
                Covariate::categorical(c.name.clone(), (0..levels).map(|l| format!("L{l}")).collect())
            }
            _ => Covariate::numeric(c.name.clone()),
        })
        .collect();
    Dataset::new(
        (1..=q).map(|c| c.to_string()).collect(),
        0,
        covariates,
        Some((1..=cfg.n_groups).map(|g| format!("g{g}")).collect()),
        (1..=n_obs).map(|j| j.to_string()).collect(),
        obs_group,
        records,
    )
}

/// Simulated data together with the drawn random effects (groups × categories).
pub fn simulate_with_effects(cfg: &SimulationConfig) -> Result<(Dataset, DMatrix<f64>)> {
    let q = cfg.n_categories;
    let template = covariate_template(cfg)?;
    let encoder = Encoder::new(&template, &cfg.spec)?;
    if cfg.gamma.len() != encoder.n_columns() {
        return Err(Error::Validation(format!(
            "expected {} coefficients ({:?}), got {}",
            encoder.n_columns(),
            encoder.column_names(),
            cfg.gamma.len()
        )));
    }
    let eta = encoder.encode_dataset(&template) * DVector::from_column_slice(&cfg.gamma);
    let baseline = encoder.baseline();

    let per_group: Vec<(Vec<f64>, Vec<u64>)> = (0..cfg.n_groups)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let lambda: Vec<f64> = (0..q)
                .map(|c| match &cfg.beta {
                    Some(beta) if c != baseline => {
                        let b = beta[if c < baseline { c } else { c - 1 }];
                        Gamma::new(1.0 / b, b).unwrap().sample(&mut rng)
                    }
                    _ => 1.0,
                })
                .collect();
            let mut counts = Vec::with_capacity(cfg.obs_per_group * q);
            for j in i * cfg.obs_per_group..(i + 1) * cfg.obs_per_group {
                for c in 0..q {
                    let mean = cfg.delta * lambda[c] * eta[j * q + c].exp();
                    counts.push(poisson_draw(mean, &mut rng));
                }
            }
            (lambda, counts)
        })
        .collect();
    let lambda = DMatrix::from_fn(cfg.n_groups, q, |i, c| per_group[i].0[c]);
    let counts: Vec<u64> = per_group.into_iter().flat_map(|(_, c)| c).collect();
    Ok((template.with_counts(&counts)?, lambda))
}

pub fn simulate(cfg: &SimulationConfig) -> Result<Dataset> {
    Ok(simulate_with_effects(cfg)?.0)
}
