//! ECM fitting of the Gamma-Poisson model and its standard errors.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::design::{Encoder, ModelSpec, RandomEffects};
use crate::error::{Error, Result};
use crate::fixed::fit_fixed;
use crate::gamma_poisson::{cm_step_beta, GammaPoissonModel, GammaPoissonParams};
use crate::glm::IrlsOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct EcmOptions {
    /// Stop when the largest relative parameter change and the absolute
    /// log-likelihood change both fall below this.
    pub tol: f64,
    pub max_iter: usize,
    pub initial_beta: f64,
    /// Hold β at these values (non-baseline order) and estimate γ only.
    pub fixed_beta: Option<Vec<f64>>,
    pub irls: IrlsOptions,
    pub standard_errors: bool,
}

impl Default for EcmOptions {
    fn default() -> Self {
        EcmOptions {
            tol: 1e-8,
            max_iter: 5000,
            initial_beta: 0.5,
            fixed_beta: None,
            irls: IrlsOptions::default(),
            standard_errors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardErrors {
    pub gamma: Vec<f64>,
    /// Empty when β was held fixed.
    pub beta: Vec<f64>,
    pub log_beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GammaPoissonFit {
    pub names: Vec<String>,
    pub beta_labels: Vec<String>,
    pub params: GammaPoissonParams,
    /// From the inverse observed information of the profiled marginal
    /// likelihood in (γ, log β).
    pub se: Option<StandardErrors>,
    /// γ block inverted with β held at its estimate, and the β block with γ held.
    pub se_conditional: Option<StandardErrors>,
    /// Covariance of (γ, log β) from the joint observed information.
    pub covariance: Option<DMatrix<f64>>,
    pub loglik: f64,
    /// Marginal log-likelihood at the start and after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub tol: f64,
    /// Largest |∂ℓ/∂θ| over (γ, log β) at the returned estimate, by central differences.
    pub max_gradient: Option<f64>,
    /// Non-baseline categories whose β ended at the lower bound.
    pub degenerate_beta: Vec<String>,
    pub lambda_hat: DMatrix<f64>,
    pub chi_hat: DMatrix<f64>,
    pub group_ids: Vec<String>,
    pub encoder: Encoder,
    pub spec: ModelSpec,
}

impl GammaPoissonFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.params.gamma[k])
    }
}

/// Relative change max |new − old| / max(|old|, 1).
fn max_relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(o, n)| (n - o).abs() / o.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn fit_ecm(ds: &Dataset, spec: &ModelSpec, opts: &EcmOptions) -> Result<GammaPoissonFit> {
    if spec.random_effects != RandomEffects::GammaPerCategory {
        return Err(Error::Spec("ECM fit requested for a model without random effects".into()));
    }
    let model = GammaPoissonModel::new(ds, spec)?;
    let k = model.non_baseline().len();
    if let Some(fb) = &opts.fixed_beta {
        if fb.len() != k {
            return Err(Error::Validation(format!("expected {k} fixed variance parameters, got {}", fb.len())));
        }
    }

    let fixed_spec = ModelSpec { random_effects: RandomEffects::None, ..spec.clone() };
    let start = fit_fixed(ds, &fixed_spec)?;
    if !start.separated.is_empty() {
        return Err(Error::Spec(format!(
            "categories {:?} never occur; the random-effects model is not estimable",
            start.separated_labels()
        )));
    }
    let beta = opts.fixed_beta.clone().unwrap_or_else(|| vec![opts.initial_beta; k]);
    let mut params = GammaPoissonParams {
        gamma: DVector::from_vec(start.gamma.clone()),
        delta: start.delta_hat.clone(),
        beta,
    };
    let mut loglik = model.marginal_loglik(&params)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    let mut degenerate = vec![false; k];

    while iterations < opts.max_iter {
        iterations += 1;
        let (lambda, chi) = model.e_step(&params)?;
        let glm = model.cm_step_gamma(&lambda, &params.gamma, &opts.irls).map_err(|e| match e {
            Error::NonConvergence { iterations: it, reason, trace } => Error::NonConvergence {
                iterations: it,
                reason: format!("CM-step for gamma failed at ECM iteration {iterations}: {reason}"),
                trace,
            },
            other => other,
        })?;
        let mut next = GammaPoissonParams {
            gamma: glm.coefficients,
            delta: glm.nuisance,
            beta: params.beta.clone(),
        };
        if opts.fixed_beta.is_none() {
            for (b, &c) in model.non_baseline().iter().enumerate() {
                let up = cm_step_beta(
                    lambda.column(c).as_slice(),
                    chi.column(c).as_slice(),
                    params.beta[b],
                )?;
                next.beta[b] = up.beta;
                degenerate[b] = up.at_lower_bound;
            }
        }
        let next_loglik = model.marginal_loglik(&next)?;
        if next_loglik < loglik - 1e-10 {
            warn!("ECM iteration {iterations}: marginal log-likelihood decreased by {:e}", loglik - next_loglik);
        }
        let change = max_relative_change(params.gamma.as_slice(), next.gamma.as_slice())
            .max(max_relative_change(&params.beta, &next.beta));
        let dl = (next_loglik - loglik).abs();
        params = next;
        loglik = next_loglik;
        trace.push(loglik);
        debug!("ECM iteration {iterations}: loglik {loglik:.10}, max rel change {change:.3e}");
        if change < opts.tol && dl < opts.tol {
            converged = true;
            break;
        }
    }
    if converged {
        info!("ECM converged after {iterations} iterations (loglik {loglik:.6})");
    } else {
        warn!("ECM stopped after {iterations} iterations without convergence");
    }

    let (lambda_hat, chi_hat) = model.e_step(&params)?;
    let mut fit = GammaPoissonFit {
        names: model.encoder().column_names().to_vec(),
        beta_labels: model.beta_labels(),
        se: None,
        se_conditional: None,
        covariance: None,
        loglik,
        trace,
        iterations,
        converged,
        tol: opts.tol,
        max_gradient: None,
        degenerate_beta: model
            .beta_labels()
            .into_iter()
            .zip(&degenerate)
            .filter_map(|(l, &d)| d.then_some(l))
            .collect(),
        lambda_hat,
        chi_hat,
        group_ids: model.group_ids().to_vec(),
        encoder: model.encoder().clone(),
        spec: spec.clone(),
        params,
    };
    if converged && opts.standard_errors {
        let estimate_beta = opts.fixed_beta.is_none();
        let info = observed_information(&model, &fit.params, estimate_beta);
        fit.max_gradient = Some(info.gradient.amax());
        attach_standard_errors(&mut fit, &info, estimate_beta);
    }
    Ok(fit)
}

/// Finite-difference derivatives of the profiled marginal log-likelihood.
pub struct ObservedInformation {
    /// Parameter vector (γ, log β) at which derivatives were taken.
    pub theta: DVector<f64>,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Central finite-difference gradient and Hessian of the profiled marginal
/// log-likelihood in θ = (γ, log β), with δ re-profiled at every point.
/// With `estimate_beta` false only the γ block is differentiated.
pub fn observed_information(
    model: &GammaPoissonModel,
    params: &GammaPoissonParams,
    estimate_beta: bool,
) -> ObservedInformation {
    let p = params.gamma.len();
    let mut theta: Vec<f64> = params.gamma.iter().copied().collect();
    if estimate_beta {
        theta.extend(params.beta.iter().map(|b| b.ln()));
    }
    let n = theta.len();
    let h: Vec<f64> = theta.iter().map(|t| 1e-4 * t.abs().max(1.0)).collect();
    let eval = |t: &[f64]| -> f64 {
        let gamma = DVector::from_column_slice(&t[..p]);
        let beta: Vec<f64> =
            if estimate_beta { t[p..].iter().map(|u| u.exp()).collect() } else { params.beta.clone() };
        model.profiled_loglik(&gamma, &beta, &params.delta).0
    };
    let shifted = |moves: &[(usize, f64)]| -> Vec<f64> {
        let mut t = theta.clone();
        for &(k, s) in moves {
            t[k] += s * h[k];
        }
        t
    };

    let mut points: Vec<Vec<f64>> = vec![theta.clone()];
    for a in 0..n {
        points.push(shifted(&[(a, 1.0)]));
        points.push(shifted(&[(a, -1.0)]));
    }
    for a in 0..n {
        for b in 0..a {
            for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points.push(shifted(&[(a, sa), (b, sb)]));
            }
        }
    }
    let values: Vec<f64> = points.par_iter().map(|t| eval(t)).collect();

    let f0 = values[0];
    let mut gradient = DVector::zeros(n);
    let mut hessian = DMatrix::zeros(n, n);
    for a in 0..n {
        let (fp, fm) = (values[1 + 2 * a], values[2 + 2 * a]);
        gradient[a] = (fp - fm) / (2.0 * h[a]);
        hessian[(a, a)] = (fp - 2.0 * f0 + fm) / (h[a] * h[a]);
    }
    let mut idx = 1 + 2 * n;
    for a in 0..n {
        for b in 0..a {
            let v = &values[idx..idx + 4];
            let d = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h[a] * h[b]);
            hessian[(a, b)] = d;
            hessian[(b, a)] = d;
            idx += 4;
        }
    }
    ObservedInformation { theta: DVector::from_vec(theta), gradient, hessian }
}

fn inverse_information(block: DMatrix<f64>) -> Option<DMatrix<f64>> {
    (-block).cholesky().map(|c| c.inverse())
}

fn attach_standard_errors(fit: &mut GammaPoissonFit, info: &ObservedInformation, estimate_beta: bool) {
    let p = fit.params.gamma.len();
    let n = info.theta.len();
    let diag_sqrt = |m: &DMatrix<f64>, range: std::ops::Range<usize>| -> Vec<f64> {
        range.map(|k| m[(k, k)].sqrt()).collect()
    };
    let beta_ses = |log_se: &[f64]| -> Vec<f64> {
        log_se.iter().zip(&fit.params.beta).map(|(s, b)| s * b).collect()
    };

    match inverse_information(info.hessian.clone()) {
        Some(cov) => {
            let log_beta = diag_sqrt(&cov, p..n);
            fit.se = Some(StandardErrors { gamma: diag_sqrt(&cov, 0..p), beta: beta_ses(&log_beta), log_beta });
            fit.covariance = Some(cov);
        }
        None => warn!("observed information is not positive definite; standard errors unavailable"),
    }
    let gamma_block = inverse_information(info.hessian.view((0, 0), (p, p)).into_owned());
    let beta_block = if estimate_beta {
        inverse_information(info.hessian.view((p, p), (n - p, n - p)).into_owned())
    } else {
        Some(DMatrix::zeros(0, 0))
    };
    if let (Some(g), Some(b)) = (gamma_block, beta_block) {
        let log_beta = diag_sqrt(&b, 0..n - p);
        fit.se_conditional =
            Some(StandardErrors { gamma: diag_sqrt(&g, 0..p), beta: beta_ses(&log_beta), log_beta });
    }
}
