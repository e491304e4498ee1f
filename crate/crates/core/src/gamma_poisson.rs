//! Gamma-Poisson surrogate for grouped multinomial responses.
//!
//! Counts follow `Y_ijq | λ_iq ~ Poisson(δ_ij λ_iq ζ_ijq)` with
//! `λ_iq ~ Gamma(shape 1/β_q, rate 1/β_q)` (unit mean, variance β_q) for the
//! non-baseline categories and `λ_i,baseline ≡ 1`. Integrating λ out gives a
//! closed-form marginal likelihood, and the posterior of λ is again Gamma,
//! which makes the E-step of the ECM algorithm exact.

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::design::{build_design, DesignMatrix, Encoder, ModelSpec, NuisanceMode};
use crate::error::{Error, Result};
use crate::glm::{fit_poisson, GlmFit, IrlsOptions};
use crate::special::{digamma_unchecked, ln_factorial, ln_gamma};

pub const BETA_MIN: f64 = 1e-8;
pub const BETA_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct GammaPoissonParams {
    /// Structural coefficients.
    pub gamma: DVector<f64>,
    /// Incidental constants δ_ij, one per observation.
    pub delta: Vec<f64>,
    /// Random-effect variances β_q for the non-baseline categories, in label order.
    pub beta: Vec<f64>,
}

/// Grouped data and design prepared for the Gamma-Poisson likelihood.
#[derive(Debug, Clone)]
pub struct GammaPoissonModel {
    design: DesignMatrix,
    encoder: Encoder,
    n_categories: usize,
    baseline: usize,
    /// Non-baseline categories; `beta[k]` belongs to `non_baseline[k]`.
    non_baseline: Vec<usize>,
    groups: Vec<Vec<usize>>,
    group_ids: Vec<String>,
    /// y_{i+q}, groups × categories.
    group_totals: DMatrix<f64>,
    obs_totals: Vec<f64>,
    /// Σ log y_ijq!
    ln_fact: f64,
}

impl GammaPoissonModel {
    pub fn new(ds: &Dataset, spec: &ModelSpec) -> Result<Self> {
        if spec.nuisance != NuisanceMode::PerObservation {
            return Err(Error::Spec("the Gamma-Poisson model needs per-observation constants".into()));
        }
        let group_ids = ds
            .group_ids()
            .ok_or_else(|| Error::Spec("random effects require a group column".into()))?
            .to_vec();
        let design = build_design(ds, spec)?;
        let encoder = design.encoder().expect("built from a dataset").clone();
        let q = ds.n_categories();
        let groups = ds.group_members();
        let mut group_totals = DMatrix::zeros(groups.len(), q);
        for (i, row) in ds.group_category_totals().iter().enumerate() {
            for (c, &t) in row.iter().enumerate() {
                group_totals[(i, c)] = t as f64;
            }
        }
        let obs_totals = (0..ds.n_obs()).map(|j| ds.obs_total(j) as f64).collect();
        let ln_fact = ds.records().iter().map(|r| ln_factorial(r.count)).sum();
        Ok(GammaPoissonModel {
            baseline: encoder.baseline(),
            non_baseline: encoder.non_baseline().collect(),
            design,
            encoder,
            n_categories: q,
            groups,
            group_ids,
            group_totals,
            obs_totals,
            ln_fact,
        })
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs_totals.len()
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn n_structural(&self) -> usize {
        self.design.n_structural()
    }

    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }

    pub fn non_baseline(&self) -> &[usize] {
        &self.non_baseline
    }

    pub fn obs_totals(&self) -> &[f64] {
        &self.obs_totals
    }

    pub fn group_totals(&self) -> &DMatrix<f64> {
        &self.group_totals
    }

    /// Labels of the categories carrying a variance parameter.
    pub fn beta_labels(&self) -> Vec<String> {
        self.non_baseline.iter().map(|&q| self.encoder.categories()[q].clone()).collect()
    }

    pub fn validate(&self, params: &GammaPoissonParams) -> Result<()> {
        if params.gamma.len() != self.n_structural() {
            return Err(Error::Validation(format!(
                "expected {} structural coefficients, got {}",
                self.n_structural(),
                params.gamma.len()
            )));
        }
        if params.delta.len() != self.n_obs() {
            return Err(Error::Validation(format!(
                "expected {} observation constants, got {}",
                self.n_obs(),
                params.delta.len()
            )));
        }
        if params.beta.len() != self.non_baseline.len() {
            return Err(Error::Validation(format!(
                "expected {} variance parameters, got {}",
                self.non_baseline.len(),
                params.beta.len()
            )));
        }
        if let Some(b) = params.beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::Domain(format!("variance parameters must be positive, got {b}")));
        }
        if let Some(d) = params.delta.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::Domain(format!("observation constants must be non-negative, got {d}")));
        }
        Ok(())
    }

    /// ζ_ijq = exp(xᵀγ) per long row.
    pub fn zeta(&self, gamma: &DVector<f64>) -> Vec<f64> {
        (&self.design.x * gamma).iter().map(|e| e.exp()).collect()
    }

    /// S_iq = Σ_j δ_ij ζ_ijq, groups × categories.
    pub fn group_sums(&self, zeta: &[f64], delta: &[f64]) -> DMatrix<f64> {
        let q = self.n_categories;
        let mut s = DMatrix::zeros(self.groups.len(), q);
        for (i, members) in self.groups.iter().enumerate() {
            for &j in members {
                for c in 0..q {
                    s[(i, c)] += delta[j] * zeta[j * q + c];
                }
            }
        }
        s
    }

    /// Closed-form marginal log-likelihood.
    pub fn marginal_loglik(&self, params: &GammaPoissonParams) -> Result<f64> {
        self.validate(params)?;
        let zeta = self.zeta(&params.gamma);
        Ok(self.marginal_loglik_unchecked(&zeta, &params.delta, &params.beta))
    }

    fn marginal_loglik_unchecked(&self, zeta: &[f64], delta: &[f64], beta: &[f64]) -> f64 {
        let q = self.n_categories;
        let s = self.group_sums(zeta, delta);
        let group_terms: Vec<f64> = (0..self.groups.len())
            .into_par_iter()
            .map(|i| {
                let mut l = -s[(i, self.baseline)];
                for (k, &c) in self.non_baseline.iter().enumerate() {
                    l += gamma_mixture_term(1.0 / beta[k], self.group_totals[(i, c)], s[(i, c)]);
                }
                l
            })
            .collect();
        let mut row_terms = 0.0;
        for (r, &y) in self.design.response.iter().enumerate() {
            if y > 0.0 {
                row_terms += y * (delta[r / q] * zeta[r]).ln();
            }
        }
        group_terms.iter().sum::<f64>() + row_terms - self.ln_fact
    }

    /// Posterior means λ̂ and log-means χ̂ of the random effects (groups × categories).
    pub fn e_step(&self, params: &GammaPoissonParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.validate(params)?;
        let zeta = self.zeta(&params.gamma);
        Ok(self.e_step_unchecked(&zeta, &params.delta, &params.beta))
    }

    fn e_step_unchecked(&self, zeta: &[f64], delta: &[f64], beta: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let q = self.n_categories;
        let s = self.group_sums(zeta, delta);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..self.groups.len())
            .into_par_iter()
            .map(|i| {
                let mut lam = vec![1.0; q];
                let mut chi = vec![0.0; q];
                for (k, &c) in self.non_baseline.iter().enumerate() {
                    let a = 1.0 / beta[k];
                    let (l, x) = gamma_posterior(a, self.group_totals[(i, c)], s[(i, c)]);
                    lam[c] = l;
                    chi[c] = x;
                }
                (lam, chi)
            })
            .collect();
        let lambda = DMatrix::from_fn(rows.len(), q, |i, c| rows[i].0[c]);
        let chi = DMatrix::from_fn(rows.len(), q, |i, c| rows[i].1[c]);
        (lambda, chi)
    }

    /// Log-offsets log λ̂_{g(j),q} per long row.
    pub fn offsets(&self, lambda: &DMatrix<f64>) -> Vec<f64> {
        let q = self.n_categories;
        let mut off = vec![0.0; self.design.n_rows()];
        for (i, members) in self.groups.iter().enumerate() {
            for &j in members {
                for c in 0..q {
                    off[j * q + c] = lambda[(i, c)].ln();
                }
            }
        }
        off
    }

    /// CM-step for γ: Poisson regression with offset log λ̂ and the
    /// observation constants profiled out. The returned fit's `nuisance`
    /// holds the updated δ.
    pub fn cm_step_gamma(
        &self,
        lambda: &DMatrix<f64>,
        start: &DVector<f64>,
        opts: &IrlsOptions,
    ) -> Result<GlmFit> {
        let off = self.offsets(lambda);
        fit_poisson(&self.design, Some(&off), Some(start), opts)
    }

    /// δ maximizing the marginal likelihood for fixed (γ, β): the fixed point
    /// δ_ij = y_ij+ / Σ_q λ̂_iq(δ) ζ_ijq, iterated per group from `start`.
    pub fn profile_delta(&self, gamma: &DVector<f64>, beta: &[f64], start: &[f64]) -> Vec<f64> {
        let q = self.n_categories;
        let zeta = self.zeta(gamma);
        let per_group: Vec<Vec<f64>> = self
            .groups
            .par_iter()
            .enumerate()
            .map(|(i, members)| {
                let mut d: Vec<f64> = members.iter().map(|&j| start[j]).collect();
                let mut lam = vec![1.0; q];
                for _ in 0..200_000 {
                    for (k, &c) in self.non_baseline.iter().enumerate() {
                        let s: f64 = members.iter().zip(&d).map(|(&j, dj)| dj * zeta[j * q + c]).sum();
                        lam[c] = gamma_posterior(1.0 / beta[k], self.group_totals[(i, c)], s).0;
                    }
                    let mut change = 0.0f64;
                    for (dj, &j) in d.iter_mut().zip(members) {
                        let y = self.obs_totals[j];
                        let next = if y == 0.0 {
                            0.0
                        } else {
                            y / (0..q).map(|c| lam[c] * zeta[j * q + c]).sum::<f64>()
                        };
                        if next > 0.0 {
                            change = change.max(((next - *dj) / next).abs());
                        }
                        *dj = next;
                    }
                    if change < 1e-14 {
                        break;
                    }
                }
                d
            })
            .collect();
        let mut delta = vec![0.0; self.n_obs()];
        for (members, d) in self.groups.iter().zip(per_group) {
            for (&j, v) in members.iter().zip(d) {
                delta[j] = v;
            }
        }
        delta
    }

    /// Marginal log-likelihood with δ profiled out, and the profiled δ.
    pub fn profiled_loglik(&self, gamma: &DVector<f64>, beta: &[f64], start: &[f64]) -> (f64, Vec<f64>) {
        let delta = self.profile_delta(gamma, beta, start);
        let zeta = self.zeta(gamma);
        (self.marginal_loglik_unchecked(&zeta, &delta, beta), delta)
    }
}

/// log ∫ Gamma(λ; a, a) Π_j Poisson(y_j; λ m_j) dλ without the Π m_j^y / y!
/// factor: lnΓ(a+y) − lnΓ(a) + a ln a − (a+y) ln(a+S), written to stay
/// accurate for very large shapes.
pub fn gamma_mixture_term(a: f64, y: f64, s: f64) -> f64 {
    let tail = -a * (s / a).ln_1p();
    if y <= 2000.0 || a > 1e6 {
        let denom = a + s;
        let mut acc = 0.0;
        let mut k = 0.0;
        while k < y {
            acc += ((k - s) / denom).ln_1p();
            k += 1.0;
        }
        acc + tail
    } else {
        ln_gamma(a + y) - ln_gamma(a) - y * (a + s).ln() + tail
    }
}

/// Posterior mean and mean log of λ ~ Gamma(a + y, rate a + S).
pub fn gamma_posterior(a: f64, y: f64, s: f64) -> (f64, f64) {
    ((y + a) / (s + a), digamma_unchecked(y + a) - (s + a).ln())
}

/// a ln a − lnΓ(a) − a, accurate for large a.
fn shape_remainder(a: f64) -> f64 {
    if a < 10.0 {
        return a * a.ln() - ln_gamma(a) - a;
    }
    let inv = 1.0 / a;
    let inv2 = inv * inv;
    let series = inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)));
    0.5 * a.ln() - 0.918_938_533_204_672_8 - series
}

/// Expected complete-data log-likelihood of β_q:
/// Σ_i (1/β − 1) χ̂_i − λ̂_i/β − log(β)/β − lnΓ(1/β).
pub fn beta_objective(lambda: &[f64], chi: &[f64], beta: f64) -> f64 {
    let a = 1.0 / beta;
    let n = lambda.len() as f64;
    // Σ[(a−1)χ − aλ] + n(a ln a − lnΓ(a)) with the O(a) pieces cancelled analytically
    let s: f64 = lambda.iter().zip(chi).map(|(l, c)| a * (c - l + 1.0) - c).sum();
    s + n * shape_remainder(a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaUpdate {
    pub beta: f64,
    pub objective: f64,
    /// The maximum sits at the lower bound: the random effect is vanishing.
    pub at_lower_bound: bool,
}

struct NegBetaObjective<'a> {
    lambda: &'a [f64],
    chi: &'a [f64],
}

impl CostFunction for NegBetaObjective<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, u: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-beta_objective(self.lambda, self.chi, u.exp()))
    }
}

/// CM-step for one variance parameter: bounded Brent search on log β.
pub fn cm_step_beta(lambda: &[f64], chi: &[f64], previous: f64) -> Result<BetaUpdate> {
    if lambda.iter().chain(chi).any(|v| !v.is_finite()) {
        return Err(Error::Domain("posterior statistics must be finite".into()));
    }
    let (lo, hi) = (BETA_MIN.ln(), BETA_MAX.ln());
    let problem = NegBetaObjective { lambda, chi };
    let solver = BrentOpt::new(lo, hi).set_tolerance(1e-12, 1e-12);
    let result = Executor::new(problem, solver)
        .configure(|s| s.max_iters(500))
        .run()
        .map_err(|e| Error::NonConvergence { iterations: 0, reason: e.to_string(), trace: vec![] })?;
    let u = result.state.best_param.unwrap_or(previous.ln());
    let mut best = BetaUpdate { beta: u.exp(), objective: beta_objective(lambda, chi, u.exp()), at_lower_bound: false };
    for (cand, lower) in [(BETA_MIN, true), (BETA_MAX, false), (previous, false)] {
        if !(cand > 0.0 && cand.is_finite()) {
            continue;
        }
        let f = beta_objective(lambda, chi, cand);
        if f > best.objective {
            best = BetaUpdate { beta: cand, objective: f, at_lower_bound: lower };
        }
    }
    if best.beta <= BETA_MIN * (1.0 + 1e-6) {
        best.at_lower_bound = true;
        warn!("variance parameter reached its lower bound {BETA_MIN:e}: the random effect is vanishing");
    }
    Ok(best)
}

/// Marginal log-likelihood of `ds` under `spec` at `params`.
pub fn marginal_loglik(ds: &Dataset, spec: &ModelSpec, params: &GammaPoissonParams) -> Result<f64> {
    GammaPoissonModel::new(ds, spec)?.marginal_loglik(params)
}
