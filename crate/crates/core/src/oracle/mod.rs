//! Independent checks: appendix distributions, brute-force quadrature over
//! the random effects, a direct multinomial optimizer, and data simulation.

pub mod direct_mle;
pub mod distributions;
pub mod quadrature;
pub mod simulate;

pub use direct_mle::{direct_multinomial_mle, DirectMle};
pub use distributions::{nb_pmf, nm_pmf, NegBinomial, NegMultinomial};
pub use quadrature::{mixed_binomial_log_prob, quadrature_marginal, quadrature_posterior_mean, LogIntegral, MixtureModel};
pub use simulate::{simulate, simulate_with_effects, SimCovariate, SimCovariateKind, SimulationConfig};

use crate::error::Result;
use crate::gamma_poisson::{GammaPoissonModel, GammaPoissonParams};
use crate::special::ln_factorial;

/// Marginal log-likelihood as a negative binomial for every category total
/// times a multinomial split of that total across the group's observations
/// (Poisson for the baseline total).
pub fn factorized_loglik(model: &GammaPoissonModel, params: &GammaPoissonParams) -> Result<f64> {
    model.validate(params)?;
    let q = model.n_categories();
    let zeta = model.zeta(&params.gamma);
    let s = model.group_sums(&zeta, &params.delta);
    let y = &model.design().response;
    let mut total = 0.0;
    for (i, members) in model.groups().iter().enumerate() {
        for c in 0..q {
            let yt = model.group_totals()[(i, c)];
            let st = s[(i, c)];
            // law of the category total
            total += match model.non_baseline().iter().position(|&nb| nb == c) {
                None => {
                    if yt == 0.0 {
                        -st
                    } else {
                        yt * st.ln() - st - ln_factorial(yt as u64)
                    }
                }
                Some(k) => {
                    let a = 1.0 / params.beta[k];
                    if st == 0.0 {
                        0.0
                    } else {
                        NegBinomial { r: a, p: st / (a + st) }.ln_pmf(yt as u64)
                    }
                }
            };
            // split of the total across observations
            if yt > 0.0 {
                total += ln_factorial(yt as u64);
                for &j in members {
                    let yj = y[j * q + c];
                    total -= ln_factorial(yj as u64);
                    if yj > 0.0 {
                        total += yj * (params.delta[j] * zeta[j * q + c] / st).ln();
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Σ_x pmf(x) with the support truncated once a geometric tail bound falls
/// below `tol`; returns the sum and the number of terms used.
pub fn nb_total_mass(d: &NegBinomial, tol: f64) -> (f64, u64) {
    let mut sum = 0.0;
    let mut x = 0u64;
    loop {
        let term = nb_pmf(d, x);
        sum += term;
        // ratio of successive terms is p (r + x)/(x + 1); it tends to p
        let ratio = d.p * (d.r + x as f64) / (x as f64 + 1.0);
        let rho = ratio.max(d.p);
        if ratio < 1.0 && term * rho / (1.0 - rho) < tol {
            return (sum, x + 1);
        }
        x += 1;
    }
}
