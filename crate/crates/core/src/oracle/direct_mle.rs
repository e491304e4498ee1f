//! Direct maximization of the multinomial log-likelihood, with no Poisson
//! surrogate involved: damped Newton from zero on a finite-difference
//! Hessian of the analytic gradient. The log-likelihood is concave, so step
//! halving is all the globalization needed.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::design::{Encoder, ModelSpec, RandomEffects};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DirectMle {
    pub names: Vec<String>,
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    /// Σ_jq y_jq log p_jq (without the multinomial coefficients).
    pub loglik: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Multinomial log-likelihood of a fixed design, parameterized by γ.
pub struct Multinomial {
    x: DMatrix<f64>,
    y: Vec<f64>,
    q: usize,
}

impl Multinomial {
    pub fn new(ds: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let enc = Encoder::new(ds, spec)?;
        Ok(Multinomial {
            x: enc.encode_dataset(ds),
            y: ds.records().iter().map(|r| r.count as f64).collect(),
            q: ds.n_categories(),
        })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn probabilities(&self, gamma: &[f64]) -> Vec<f64> {
        let eta = &self.x * DVector::from_column_slice(gamma);
        let mut p = vec![0.0; eta.len()];
        for (pc, ec) in p.chunks_mut(self.q).zip(eta.as_slice().chunks(self.q)) {
            let top = ec.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = ec.iter().map(|e| (e - top).exp()).sum();
            for (pv, e) in pc.iter_mut().zip(ec) {
                *pv = (e - top).exp() / s;
            }
        }
        p
    }

    pub fn loglik(&self, gamma: &[f64]) -> f64 {
        let p = self.probabilities(gamma);
        self.y.iter().zip(&p).filter(|(y, _)| **y > 0.0).map(|(y, p)| y * p.ln()).sum()
    }

    /// Σ_j Σ_q (y_jq − y_j+ p_jq) x_jq
    pub fn gradient(&self, gamma: &[f64]) -> Vec<f64> {
        let p = self.probabilities(gamma);
        let mut g = vec![0.0; self.dim()];
        for (j, (yc, pc)) in self.y.chunks(self.q).zip(p.chunks(self.q)).enumerate() {
            let n: f64 = yc.iter().sum();
            for c in 0..self.q {
                let r = yc[c] - n * pc[c];
                let row = j * self.q + c;
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += r * self.x[(row, k)];
                }
            }
        }
        g
    }

    /// Hessian of the log-likelihood by central differences of the gradient.
    pub fn hessian(&self, gamma: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for k in 0..n {
            let step = 1e-5 * gamma[k].abs().max(1.0);
            let mut up = gamma.to_vec();
            let mut dn = gamma.to_vec();
            up[k] += step;
            dn[k] -= step;
            let (gu, gd) = (self.gradient(&up), self.gradient(&dn));
            for r in 0..n {
                h[(r, k)] = (gu[r] - gd[r]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn direct_multinomial_mle(ds: &Dataset, spec: &ModelSpec) -> Result<DirectMle> {
    if spec.random_effects != RandomEffects::None {
        return Err(Error::Spec("direct multinomial MLE requires a fixed-effects model".into()));
    }
    let names = Encoder::new(ds, spec)?.column_names().to_vec();
    let problem = Multinomial::new(ds, spec)?;
    let n = problem.dim();
    let mut gamma = vec![0.0; n];
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..500 {
        iterations += 1;
        let g = problem.gradient(&gamma);
        let gn = norm(&g);
        trace.push(gn);
        let neg_h = -problem.hessian(&gamma);
        let Some(ch) = neg_h.cholesky() else {
            break;
        };
        let step = ch.solve(&DVector::from_vec(g));
        if gn < 1e-8 && step.norm() < 1e-6 * (1.0 + norm(&gamma)) {
            converged = true;
            break;
        }
        let l0 = problem.loglik(&gamma);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = gamma.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if problem.loglik(&cand) >= l0 - 1e-12 * l0.abs() {
                gamma = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let g = problem.gradient(&gamma);
    if !converged {
        return Err(Error::NonConvergence {
            iterations,
            reason: format!(
                "multinomial likelihood has no finite maximizer or Newton stalled (gradient norm {:.3e}, |gamma| {:.3e})",
                norm(&g),
                norm(&gamma)
            ),
            trace,
        });
    }
    let cov = (-problem.hessian(&gamma)).cholesky().map(|c| c.inverse());
    let se = match cov {
        Some(c) => (0..n).map(|k| c[(k, k)].sqrt()).collect(),
        None => vec![f64::NAN; n],
    };
    Ok(DirectMle {
        names,
        loglik: problem.loglik(&gamma),
        gradient_norm: norm(&g),
        gamma,
        se,
        iterations,
    })
}
