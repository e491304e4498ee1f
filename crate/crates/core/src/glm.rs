//! Poisson log-linear regression by Newton/IRLS.
//!
//! When the design carries a nuisance block (one multiplicative constant δ_b
//! per block of rows) the constants are profiled out analytically:
//! δ_b = y_b+ / Σ_{r∈b} exp(η_r). The Newton step for the structural
//! coefficients then uses the Schur complement of the nuisance block,
//!
//!   I = Σ_r μ_r x_r x_rᵀ − Σ_b s_b s_bᵀ / m_b,   s_b = Σ_{r∈b} μ_r x_r,  m_b = Σ_{r∈b} μ_r,
//!
//! which is exactly the structural block of the full inverse information.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::special::ln_gamma;

/// Largest linear predictor accepted before exp() is considered divergent.
const ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    /// Relative deviance change that stops the iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { tol: 1e-10, max_iter: 100, max_halvings: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    /// Structural coefficients.
    pub coefficients: DVector<f64>,
    /// Inverse (profiled) Fisher information of the structural coefficients.
    pub covariance: DMatrix<f64>,
    /// μ per row.
    pub fitted_values: Vec<f64>,
    /// Profiled multiplicative constant per nuisance block (empty without one).
    pub nuisance: Vec<f64>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Deviance after each iteration, starting with the initial value.
    pub trace: Vec<f64>,
}

impl GlmFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.covariance.nrows()).map(|k| self.covariance[(k, k)].sqrt()).collect()
    }
}

struct State {
    beta: DVector<f64>,
    mu: Vec<f64>,
    delta: Vec<f64>,
    deviance: f64,
}

struct Problem<'a> {
    d: &'a DesignMatrix,
    offset: Vec<f64>,
    /// Rows of each nuisance block.
    blocks: Vec<Vec<usize>>,
    block_total: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(d: &'a DesignMatrix, offset: Option<&[f64]>) -> Result<Self> {
        let n = d.n_rows();
        let offset = match offset {
            Some(o) if o.len() != n => {
                return Err(Error::Validation(format!("offset has {} entries for {n} rows", o.len())))
            }
            Some(o) if o.iter().any(|v| !v.is_finite()) => {
                return Err(Error::Validation("offset contains non-finite values".into()))
            }
            Some(o) => o.to_vec(),
            None => vec![0.0; n],
        };
        if let Some(y) = d.response.iter().find(|y| !(**y >= 0.0 && y.is_finite())) {
            return Err(Error::Validation(format!("response must be a non-negative count, got {y}")));
        }
        let mut blocks = vec![Vec::new(); d.n_nuisance()];
        if let Some(idx) = &d.nuisance_block {
            for (r, &b) in idx.iter().enumerate() {
                blocks[b].push(r);
            }
        }
        let block_total = blocks.iter().map(|rows| rows.iter().map(|&r| d.response[r]).sum()).collect();
        Ok(Problem { d, offset, blocks, block_total })
    }

    fn has_nuisance(&self) -> bool {
        self.d.nuisance_block.is_some()
    }

    fn eta(&self, beta: &DVector<f64>) -> Vec<f64> {
        let xb = &self.d.x * beta;
        xb.iter().zip(&self.offset).map(|(a, o)| a + o).collect()
    }

    /// Fitted means and profiled constants; `None` if the predictor overflows.
    fn evaluate(&self, beta: DVector<f64>) -> Option<State> {
        let eta = self.eta(&beta);
        if eta.iter().any(|e| !e.is_finite()) {
            return None;
        }
        let mut mu = vec![0.0; eta.len()];
        let mut delta = Vec::with_capacity(self.blocks.len());
        if self.has_nuisance() {
            for (rows, &total) in self.blocks.iter().zip(&self.block_total) {
                if total == 0.0 || rows.is_empty() {
                    delta.push(0.0);
                    continue;
                }
                let top = rows.iter().map(|&r| eta[r]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = rows.iter().map(|&r| (eta[r] - top).exp()).sum();
                for &r in rows {
                    mu[r] = total * (eta[r] - top).exp() / s;
                }
                delta.push(total / s * (-top).exp());
            }
        } else {
            if eta.iter().any(|&e| e > ETA_MAX) {
                return None;
            }
            for (m, e) in mu.iter_mut().zip(&eta) {
                *m = e.exp();
            }
        }
        let deviance = poisson_deviance(&self.d.response, &mu);
        if !deviance.is_finite() {
            return None;
        }
        Some(State { beta, mu, delta, deviance })
    }

    /// Score and (profiled) information at `mu`.
    fn score_information(&self, mu: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let x = &self.d.x;
        let p = x.ncols();
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        let mut row = vec![0.0; p];
        for r in 0..x.nrows() {
            let m = mu[r];
            let resid = self.d.response[r] - m;
            for c in 0..p {
                row[c] = x[(r, c)];
            }
            for a in 0..p {
                score[a] += resid * row[a];
                if m == 0.0 {
                    continue;
                }
                let wa = m * row[a];
                for b in 0..=a {
                    info[(a, b)] += wa * row[b];
                }
            }
        }
        if self.has_nuisance() {
            let mut s = vec![0.0; p];
            for rows in &self.blocks {
                let m: f64 = rows.iter().map(|&r| mu[r]).sum();
                if m <= 0.0 {
                    continue;
                }
                s.iter_mut().for_each(|v| *v = 0.0);
                for &r in rows {
                    for c in 0..p {
                        s[c] += mu[r] * x[(r, c)];
                    }
                }
                for a in 0..p {
                    for b in 0..=a {
                        info[(a, b)] -= s[a] * s[b] / m;
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        (score, info)
    }

    /// Structural columns centred within nuisance blocks, restricted to rows
    /// that carry information (blocks with a positive total).
    fn centred(&self, columns: &DMatrix<f64>) -> DMatrix<f64> {
        if !self.has_nuisance() {
            return columns.clone();
        }
        let mut out = DMatrix::zeros(columns.nrows(), columns.ncols());
        for (rows, &total) in self.blocks.iter().zip(&self.block_total) {
            if total == 0.0 {
                continue;
            }
            for c in 0..columns.ncols() {
                let mean = rows.iter().map(|&r| columns[(r, c)]).sum::<f64>() / rows.len() as f64;
                for &r in rows {
                    out[(r, c)] = columns[(r, c)] - mean;
                }
            }
        }
        out
    }

    /// Names the first structural column that is (numerically) a linear
    /// combination of the preceding ones, after removing the nuisance block.
    fn check_aliasing(&self) -> Result<()> {
        let q = self.centred(&self.d.x);
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for c in 0..q.ncols() {
            let orig = q.column(c).into_owned();
            let norm0 = orig.norm();
            let mut v = orig;
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
            let norm = v.norm();
            if norm0 == 0.0 || norm <= 1e-9 * norm0 {
                return Err(Error::Aliasing { column: self.d.column_names[c].clone() });
            }
            basis.push(v / norm);
        }
        Ok(())
    }

    /// Least squares of log(y + 0.5) − offset on the centred design.
    fn initial(&self) -> DVector<f64> {
        let z = DMatrix::from_iterator(
            self.d.n_rows(),
            1,
            self.d.response.iter().zip(&self.offset).map(|(y, o)| (y + 0.5).ln() - o),
        );
        let xc = self.centred(&self.d.x);
        let zc = self.centred(&z);
        let xtx = xc.transpose() * &xc;
        let xtz = xc.transpose() * zc.column(0);
        xtx.cholesky()
            .map(|ch| ch.solve(&xtz))
            .unwrap_or_else(|| DVector::zeros(self.d.n_structural()))
    }
}

pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| {
            if y == 0.0 {
                2.0 * m
            } else {
                2.0 * (y * (y / m).ln() - (y - m))
            }
        })
        .sum()
}

/// Σ y log μ − μ − log y!
pub fn poisson_loglik(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&y, &m)| if y == 0.0 { -m } else { y * m.ln() - m - ln_gamma(y + 1.0) })
        .sum()
}

/// Fits the Poisson surrogate model `y ~ Poisson(δ_b exp(xᵀγ + offset))`.
/// `start` warm-starts the structural coefficients.
pub fn fit_poisson(
    design: &DesignMatrix,
    offset: Option<&[f64]>,
    start: Option<&DVector<f64>>,
    opts: &IrlsOptions,
) -> Result<GlmFit> {
    let prob = Problem::new(design, offset)?;
    let p = design.n_structural();
    if let Some(s) = start {
        if s.len() != p {
            return Err(Error::Validation(format!("start has {} entries, design has {p} columns", s.len())));
        }
    }
    prob.check_aliasing()?;

    let beta0 = start.cloned().unwrap_or_else(|| prob.initial());
    let mut state = match prob.evaluate(beta0) {
        Some(s) => s,
        // a wild warm start or initial value: fall back to zero
        None => prob.evaluate(DVector::zeros(p)).ok_or_else(|| Error::NonConvergence {
            iterations: 0,
            reason: "linear predictor overflows at the starting values".into(),
            trace: vec![],
        })?,
    };
    let mut trace = vec![state.deviance];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let (score, info) = prob.score_information(&state.mu);
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                return Err(Error::NonConvergence {
                    iterations,
                    reason: "information matrix is not positive definite".into(),
                    trace,
                })
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &state.beta + &step * t;
            if let Some(next) = prob.evaluate(cand) {
                if next.deviance <= state.deviance * (1.0 + 1e-15) + 1e-300 {
                    accepted = Some(next);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            // no descent available: either at the optimum to machine precision or diverging
            let scale = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ty = design.x.tr_mul(&DVector::from_column_slice(&design.response)).amax().max(1.0);
            if scale <= 1e-6 * ty {
                converged = true;
                break;
            }
            return Err(Error::NonConvergence {
                iterations,
                reason: "step-halving failed to reduce the deviance (fitted values overflow)".into(),
                trace,
            });
        };
        let change = (state.deviance - next.deviance).abs() / (next.deviance.abs() + 0.1);
        state = next;
        trace.push(state.deviance);
        debug!("irls iter {iterations}: deviance {:.12e}, rel change {change:.3e}", state.deviance);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("IRLS stopped after {iterations} iterations without meeting tolerance");
    }

    let (_, info) = prob.score_information(&state.mu);
    let covariance = match info.cholesky() {
        Some(ch) => ch.inverse(),
        None => {
            warn!("information matrix is singular at the solution; covariance unavailable");
            DMatrix::from_element(p, p, f64::NAN)
        }
    };
    let log_likelihood = poisson_loglik(&design.response, &state.mu);
    Ok(GlmFit {
        coefficients: state.beta,
        covariance,
        fitted_values: state.mu,
        nuisance: state.delta,
        deviance: state.deviance,
        log_likelihood,
        iterations,
        converged,
        trace,
    })
}
