//! Fixed-effects multinomial regression fitted exactly through its Poisson
//! surrogate: the observation constants δ_j are profiled out, so the
//! structural estimates and their information coincide with the multinomial
//! maximum-likelihood ones.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::design::{build_design, CovariateProfile, Encoder, ModelSpec, RandomEffects};
use crate::error::{Error, Result};
use crate::glm::{fit_poisson, IrlsOptions};
use crate::special::ln_factorial;

#[derive(Debug, Clone)]
pub struct FixedFit {
    pub names: Vec<String>,
    /// Structural coefficients. A category that never occurs has intercept −∞
    /// and NaN slopes.
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    /// Covariance of the estimable coefficients (NaN rows/columns for separated ones).
    pub covariance: DMatrix<f64>,
    /// δ̂_j = y_j+ / ζ̂_j+ per observation.
    pub delta_hat: Vec<f64>,
    pub multinomial_loglik: f64,
    pub surrogate_profiled_loglik: f64,
    /// Poisson log-likelihood of the surrogate at the optimum.
    pub poisson_loglik: f64,
    /// p̂_jq, one row per observation.
    pub fitted_probabilities: Vec<Vec<f64>>,
    /// Categories with zero total count (estimates pushed to the boundary).
    pub separated: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    pub encoder: Encoder,
}

impl FixedFit {
    pub fn separated_labels(&self) -> Vec<&str> {
        self.separated.iter().map(|&q| self.encoder.categories()[q].as_str()).collect()
    }

    /// Linear predictors xᵀγ of one observation (−∞ for separated categories).
    fn eta_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        linear_predictor(x, &self.gamma, &self.separated, self.encoder.categories().len())
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.gamma[k])
    }
}

/// η for rows laid out observation-major with Q categories; coefficients that
/// are not finite are ignored and separated categories get −∞.
fn linear_predictor(x: &DMatrix<f64>, gamma: &[f64], separated: &[usize], q: usize) -> Vec<f64> {
    let finite: Vec<f64> = gamma.iter().map(|g| if g.is_finite() { *g } else { 0.0 }).collect();
    let eta = x * DVector::from_vec(finite);
    eta.iter()
        .enumerate()
        .map(|(r, &e)| if separated.contains(&(r % q)) { f64::NEG_INFINITY } else { e })
        .collect()
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let top = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = eta.iter().map(|e| (e - top).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(eta: &[f64]) -> f64 {
    let top = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + eta.iter().map(|e| (e - top).exp()).sum::<f64>().ln()
}

/// Multinomial log-likelihood Σ_j [log y_j+! − Σ_q log y_jq! + Σ_q y_jq log ζ_jq − y_j+ log ζ_j+]
/// with log ζ given per long row.
pub fn multinomial_loglik_eta(ds: &Dataset, eta: &[f64]) -> f64 {
    let q = ds.n_categories();
    (0..ds.n_obs())
        .map(|j| {
            let e = &eta[j * q..(j + 1) * q];
            let counts = ds.counts(j);
            let total: u64 = counts.iter().sum();
            if total == 0 {
                return 0.0;
            }
            let lse = log_sum_exp(e);
            let mut l = ln_factorial(total);
            for (c, &y) in counts.iter().enumerate() {
                l -= ln_factorial(y);
                if y > 0 {
                    l += y as f64 * (e[c] - lse);
                }
            }
            l
        })
        .sum()
}

/// Poisson surrogate log-likelihood with δ profiled out (up to the Σ log y! constant):
/// −Σ_j y_j+ + Σ_j y_j+ log y_j+ − Σ_j y_j+ log ζ_j+ + Σ_jq y_jq log ζ_jq.
pub fn profiled_surrogate_loglik_eta(ds: &Dataset, eta: &[f64]) -> f64 {
    let q = ds.n_categories();
    (0..ds.n_obs())
        .map(|j| {
            let e = &eta[j * q..(j + 1) * q];
            let counts = ds.counts(j);
            let total: u64 = counts.iter().sum();
            if total == 0 {
                return 0.0;
            }
            let t = total as f64;
            let mut l = -t + t * t.ln() - t * log_sum_exp(e);
            for (c, &y) in counts.iter().enumerate() {
                if y > 0 {
                    l += y as f64 * e[c];
                }
            }
            l
        })
        .sum()
}

/// Multinomial log-likelihood at arbitrary structural coefficients.
pub fn multinomial_loglik_at(ds: &Dataset, encoder: &Encoder, gamma: &[f64]) -> f64 {
    let x = encoder.encode_dataset(ds);
    multinomial_loglik_eta(ds, &linear_predictor(&x, gamma, &[], ds.n_categories()))
}

/// Profiled surrogate log-likelihood at arbitrary structural coefficients.
pub fn profiled_surrogate_loglik_at(ds: &Dataset, encoder: &Encoder, gamma: &[f64]) -> f64 {
    let x = encoder.encode_dataset(ds);
    profiled_surrogate_loglik_eta(ds, &linear_predictor(&x, gamma, &[], ds.n_categories()))
}

/// Multinomial log-likelihood of `ds` under a fitted model.
pub fn loglik_multinomial(fit: &FixedFit, ds: &Dataset) -> f64 {
    let x = fit.encoder.encode_dataset(ds);
    multinomial_loglik_eta(ds, &fit.eta_rows(&x))
}

/// Fitted probabilities for a new covariate profile.
pub fn predict_probabilities(fit: &FixedFit, profile: &CovariateProfile) -> Result<Vec<f64>> {
    let x = fit.encoder.encode_profile(profile)?;
    Ok(softmax(&fit.eta_rows(&x)))
}

pub fn fit_fixed(ds: &Dataset, spec: &ModelSpec) -> Result<FixedFit> {
    fit_fixed_with(ds, spec, &IrlsOptions::default())
}

pub fn fit_fixed_with(ds: &Dataset, spec: &ModelSpec, opts: &IrlsOptions) -> Result<FixedFit> {
    if spec.random_effects != RandomEffects::None {
        return Err(Error::Spec("fixed-effects fit requested for a model with random effects".into()));
    }
    let design = build_design(ds, spec)?;
    let encoder = design.encoder().expect("built from a dataset").clone();
    let q = ds.n_categories();
    let totals = ds.category_totals();
    if totals[encoder.baseline()] == 0 {
        return Err(Error::Spec(format!(
            "baseline category `{}` never occurs; choose another baseline",
            encoder.categories()[encoder.baseline()]
        )));
    }
    let separated: Vec<usize> = (0..q).filter(|&c| totals[c] == 0).collect();
    let col_cat = encoder.column_category();
    let p = design.n_structural();
    let keep_cols: Vec<usize> =
        (0..p).filter(|&c| col_cat[c].is_none_or(|cat| !separated.contains(&cat))).collect();
    let fit = if separated.is_empty() {
        fit_poisson(&design, None, None, opts)?
    } else {
        let labels: Vec<&str> = separated.iter().map(|&c| encoder.categories()[c].as_str()).collect();
        warn!("categories {labels:?} have zero total count; their intercepts are -inf (separation)");
        let keep_rows: Vec<usize> =
            (0..design.n_rows()).filter(|&r| !separated.contains(&design.row_category[r])).collect();
        fit_poisson(&design.subset(&keep_rows, &keep_cols), None, None, opts)?
    };

    let mut gamma = vec![f64::NAN; p];
    let mut covariance = DMatrix::from_element(p, p, f64::NAN);
    for (a, &ca) in keep_cols.iter().enumerate() {
        gamma[ca] = fit.coefficients[a];
        for (b, &cb) in keep_cols.iter().enumerate() {
            covariance[(ca, cb)] = fit.covariance[(a, b)];
        }
    }
    // separated category intercepts sit first in the structural block
    for (k, c) in encoder.non_baseline().enumerate() {
        if separated.contains(&c) {
            gamma[k] = f64::NEG_INFINITY;
        }
    }
    let se: Vec<f64> = (0..p).map(|k| covariance[(k, k)].sqrt()).collect();

    let x = encoder.encode_dataset(ds);
    let eta = linear_predictor(&x, &gamma, &separated, q);
    let mut delta_hat = Vec::with_capacity(ds.n_obs());
    let mut probs = Vec::with_capacity(ds.n_obs());
    for j in 0..ds.n_obs() {
        let e = &eta[j * q..(j + 1) * q];
        delta_hat.push(ds.obs_total(j) as f64 * (-log_sum_exp(e)).exp());
        probs.push(softmax(e));
    }
    Ok(FixedFit {
        names: encoder.column_names().to_vec(),
        gamma,
        se,
        covariance,
        delta_hat,
        multinomial_loglik: multinomial_loglik_eta(ds, &eta),
        surrogate_profiled_loglik: profiled_surrogate_loglik_eta(ds, &eta),
        poisson_loglik: fit.log_likelihood,
        fitted_probabilities: probs,
        separated,
        iterations: fit.iterations,
        converged: fit.converged,
        trace: fit.trace,
        encoder,
    })
}
