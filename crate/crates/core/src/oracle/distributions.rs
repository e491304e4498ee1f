//! Negative binomial and negative multinomial distributions.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::error::{Error, Result};
use crate::special::{ln_factorial, ln_gamma};

/// P(X = x) = Γ(r + x) / (x! Γ(r)) (1 − p)^r p^x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegBinomial {
    pub r: f64,
    pub p: f64,
}

impl NegBinomial {
    pub fn new(r: f64, p: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!("negative binomial shape must be positive, got {r}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("negative binomial probability must lie in (0,1), got {p}")));
        }
        Ok(NegBinomial { r, p })
    }

    pub fn ln_pmf(&self, x: u64) -> f64 {
        let xf = x as f64;
        ln_gamma(self.r + xf) - ln_factorial(x) - ln_gamma(self.r) + self.r * (-self.p).ln_1p() + xf * self.p.ln()
    }

    pub fn mean(&self) -> f64 {
        self.r * self.p / (1.0 - self.p)
    }

    /// Draws via the Gamma-Poisson mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let lambda = Gamma::new(self.r, self.p / (1.0 - self.p)).unwrap().sample(rng);
        poisson_draw(lambda, rng)
    }
}

/// P(x_1..x_n) = Γ(x0 + Σx) / (Γ(x0) Π x_i!) p_0^{x0} Π p_i^{x_i}.
#[derive(Debug, Clone, PartialEq)]
pub struct NegMultinomial {
    pub x0: f64,
    /// (p_0, p_1, …, p_n), summing to one.
    pub p: Vec<f64>,
}

impl NegMultinomial {
    pub fn new(x0: f64, p: Vec<f64>) -> Result<Self> {
        if !(x0 > 0.0 && x0.is_finite()) {
            return Err(Error::Domain(format!("negative multinomial shape must be positive, got {x0}")));
        }
        if p.len() < 2 || p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Domain("negative multinomial probabilities must lie in (0,1)".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("negative multinomial probabilities sum to {total}")));
        }
        Ok(NegMultinomial { x0, p })
    }

    pub fn dim(&self) -> usize {
        self.p.len() - 1
    }

    pub fn ln_pmf(&self, x: &[u64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!("expected {} counts, got {}", self.dim(), x.len())));
        }
        let sum: f64 = x.iter().map(|&v| v as f64).sum();
        let mut l = ln_gamma(self.x0 + sum) - ln_gamma(self.x0) + self.x0 * self.p[0].ln();
        for (&xi, pi) in x.iter().zip(&self.p[1..]) {
            l += xi as f64 * pi.ln() - ln_factorial(xi);
        }
        Ok(l)
    }

    pub fn mean(&self) -> Vec<f64> {
        self.p[1..].iter().map(|pi| self.x0 / self.p[0] * pi).collect()
    }

    /// Draws via λ ~ Gamma(x0, 1), X_i ~ Poisson(λ p_i / p_0).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        let lambda = Gamma::new(self.x0, 1.0).unwrap().sample(rng);
        self.p[1..].iter().map(|pi| poisson_draw(lambda * pi / self.p[0], rng)).collect()
    }
}

pub fn nb_pmf(d: &NegBinomial, x: u64) -> f64 {
    d.ln_pmf(x).exp()
}

pub fn nm_pmf(d: &NegMultinomial, x: &[u64]) -> Result<f64> {
    Ok(d.ln_pmf(x)?.exp())
}

pub(crate) fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).unwrap().sample(rng) as u64
    }
}
