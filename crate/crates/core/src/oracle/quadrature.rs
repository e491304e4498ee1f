//! Brute-force integration over the random effects.
//!
//! Each one-dimensional integral is taken over t = log λ ∈ [−40, 40] with
//! 15-point Gauss–Legendre panels refined by bisection. Panels are anchored at
//! the mode of the (log-concave) integrand so that very concentrated priors
//! are not missed.

use std::sync::OnceLock;

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentOpt;
use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::design::ModelSpec;
use crate::error::{Error, Result};
use crate::gamma_poisson::{GammaPoissonModel, GammaPoissonParams};
use crate::special::{ln_factorial, ln_gamma};

const T_LO: f64 = -40.0;
const T_HI: f64 = 40.0;
const MAX_DEPTH: usize = 30;
/// Panels evaluated per one-dimensional integral before giving up.
const PANEL_BUDGET: usize = 100_000;

/// Gauss–Legendre nodes and weights on [−1, 1], by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * pn - p0) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl15() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(15))
}

/// log ∫ exp(g) with its estimated relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogIntegral {
    pub value: f64,
    pub rel_error: f64,
}

fn panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (x, w) = gl15();
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    x.iter().zip(w).map(|(xi, wi)| wi * f(c + h * xi)).sum::<f64>() * h
}

struct Adaptive<'a> {
    f: &'a dyn Fn(f64) -> f64,
    panels: usize,
}

impl Adaptive<'_> {
    fn run(&mut self, a: f64, b: f64, whole: f64, abs_tol: f64, depth: usize) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let (left, right) = (panel(self.f, a, m), panel(self.f, m, b));
        self.panels += 2;
        let refined = left + right;
        let err = (refined - whole).abs();
        if err <= abs_tol || depth >= MAX_DEPTH || self.panels >= PANEL_BUDGET {
            return (refined, err);
        }
        let (l, el) = self.run(a, m, left, abs_tol / 2.0, depth + 1);
        let (r, er) = self.run(m, b, right, abs_tol / 2.0, depth + 1);
        (l + r, el + er)
    }
}

struct Negated<'a>(&'a dyn Fn(f64) -> f64);

impl CostFunction for Negated<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, t: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-(self.0)(*t))
    }
}

fn mode(g: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let solver = BrentOpt::new(lo, hi).set_tolerance(1e-13, 1e-14);
    let res = Executor::new(Negated(g), solver).configure(|s| s.max_iters(1000)).run();
    let t = res.ok().and_then(|r| r.state.best_param).unwrap_or(0.5 * (lo + hi));
    // Brent can settle on an endpoint plateau; prefer whichever is larger
    [t, lo, hi].into_iter().fold(t, |best, c| if g(c) > g(best) { c } else { best })
}

/// Mass of exp(g) beyond `end` (`dir` = 1 for the lower tail) when g is
/// linear there; zero if it is not.
fn tail(f: &dyn Fn(f64) -> f64, end: f64, dir: f64) -> f64 {
    let (f0, f1, f2) = (f(end), f(end + dir), f(end + 2.0 * dir));
    if !(f0 > 0.0 && f1 > 0.0 && f2 > 0.0) {
        return 0.0;
    }
    let (s1, s2) = ((f1 / f0).ln(), (f2 / f1).ln());
    if s1 <= 0.0 || (s2 - s1).abs() > 1e-9 * s1 {
        return 0.0;
    }
    f0 / s1
}

/// log ∫ exp(g(t)) dt for a unimodal log-integrand `g`: adaptive over
/// [lo, hi], plus the exponential tails outside it where `g` is linear.
pub fn log_integrate(g: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<LogIntegral> {
    let m = mode(g, lo, hi);
    let top = g(m);
    if !top.is_finite() {
        return Err(Error::Quadrature { achieved: f64::NAN });
    }
    let h = 1e-4 * m.abs().max(1.0);
    let curv = -(g(m + h) - 2.0 * top + g(m - h)) / (h * h);
    let sigma = if curv > 0.0 && curv.is_finite() { (1.0 / curv.sqrt()).min(hi - lo) } else { 1.0 };
    let mut cuts: Vec<f64> = [-30.0, -8.0, -2.0, 0.0, 2.0, 8.0, 30.0]
        .iter()
        .map(|k| m + k * sigma)
        .filter(|c| *c > lo && *c < hi)
        .collect();
    cuts.insert(0, lo);
    cuts.push(hi);
    cuts.dedup();

    let f = |t: f64| {
        let v = g(t) - top;
        if v.is_nan() {
            0.0
        } else {
            v.exp()
        }
    };
    let coarse: Vec<f64> = cuts.windows(2).map(|w| panel(&f, w[0], w[1])).collect();
    let crude: f64 = coarse.iter().sum();
    let abs_tol = tol * crude.max(f64::MIN_POSITIVE) / coarse.len() as f64;
    let mut total = 0.0;
    let mut err = 0.0;
    let mut engine = Adaptive { f: &f, panels: 0 };
    for (w, whole) in cuts.windows(2).zip(&coarse) {
        let (v, e) = engine.run(w[0], w[1], *whole, abs_tol, 0);
        total += v;
        err += e;
    }
    // tails beyond the range: where g is linear, ∫ exp(g) = exp(g(end)) / |g'|
    total += tail(&f, lo, 1.0) + tail(&f, hi, -1.0);
    let rel_error = err / total;
    if rel_error.is_nan() || rel_error > tol {
        return Err(Error::Quadrature { achieved: rel_error });
    }
    Ok(LogIntegral { value: top + total.ln(), rel_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureModel {
    /// Independent Poisson counts with Gamma rate multipliers.
    PoissonSurrogate,
    /// Multinomial counts whose category weights carry the Gamma multipliers.
    MultinomialMixed,
}

/// Per-row data of one group, category-major access helpers.
struct GroupData {
    /// log(δ ζ) for each (member observation, category).
    log_rate: Vec<Vec<f64>>,
    /// log ζ for each (member observation, category).
    log_zeta: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

fn group_data(model: &GammaPoissonModel, params: &GammaPoissonParams, i: usize) -> GroupData {
    let q = model.n_categories();
    let eta = &model.design().x * &params.gamma;
    let y = &model.design().response;
    let members = &model.groups()[i];
    GroupData {
        log_rate: members
            .iter()
            .map(|&j| (0..q).map(|c| params.delta[j].ln() + eta[j * q + c]).collect())
            .collect(),
        log_zeta: members.iter().map(|&j| (0..q).map(|c| eta[j * q + c]).collect()).collect(),
        counts: members.iter().map(|&j| (0..q).map(|c| y[j * q + c] as u64).collect()).collect(),
    }
}

/// a log a − log Γ(a) − a; Stirling's series once a is large so that the
/// O(a log a) terms cancel analytically.
fn prior_constant(a: f64) -> f64 {
    if a < 20.0 {
        return a * a.ln() - ln_gamma(a) - a;
    }
    let z = 1.0 / (a * a);
    0.5 * (a / (2.0 * std::f64::consts::PI)).ln() - (1.0 / 12.0 - z / 360.0 + z * z / 1260.0) / a
}

/// log Gamma(λ; a, rate a) density in t = log λ, Jacobian included:
/// a log a − log Γ(a) + a t − a e^t.
fn log_prior(a: f64, t: f64) -> f64 {
    prior_constant(a) - a * (t.exp_m1() - t)
}

fn poisson_term(y: u64, log_mean: f64) -> f64 {
    if log_mean == f64::NEG_INFINITY {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y as f64 * log_mean - log_mean.exp() - ln_factorial(y)
}

/// Marginal log-likelihood by numerical integration over every λ.
pub fn quadrature_marginal(
    ds: &Dataset,
    spec: &ModelSpec,
    params: &GammaPoissonParams,
    kind: MixtureModel,
    tol: f64,
) -> Result<LogIntegral> {
    let model = GammaPoissonModel::new(ds, spec)?;
    model.validate(params)?;
    let mut value = 0.0;
    let mut err = 0.0f64;
    for i in 0..model.n_groups() {
        let gd = group_data(&model, params, i);
        let part = match kind {
            MixtureModel::PoissonSurrogate => poisson_group(&model, params, &gd, tol)?,
            MixtureModel::MultinomialMixed => multinomial_group(&model, params, &gd, tol)?,
        };
        value += part.value;
        err += part.rel_error * part.value.abs();
    }
    Ok(LogIntegral { value, rel_error: err / value.abs().max(f64::MIN_POSITIVE) })
}

fn poisson_group(
    model: &GammaPoissonModel,
    params: &GammaPoissonParams,
    gd: &GroupData,
    tol: f64,
) -> Result<LogIntegral> {
    let b = model.baseline();
    let mut value: f64 = gd.log_rate.iter().zip(&gd.counts).map(|(lr, y)| poisson_term(y[b], lr[b])).sum();
    let mut err = 0.0;
    for (k, &c) in model.non_baseline().iter().enumerate() {
        let a = 1.0 / params.beta[k];
        let g = |t: f64| {
            log_prior(a, t)
                + gd.log_rate.iter().zip(&gd.counts).map(|(lr, y)| poisson_term(y[c], lr[c] + t)).sum::<f64>()
        };
        let li = log_integrate(&g, T_LO, T_HI, tol)?;
        value += li.value;
        err += li.rel_error;
    }
    Ok(LogIntegral { value, rel_error: err })
}

fn multinomial_loglik(gd: &GroupData, b: usize, t: &[(usize, f64)]) -> f64 {
    let mut l = 0.0;
    for (lz, y) in gd.log_zeta.iter().zip(&gd.counts) {
        let n: u64 = y.iter().sum();
        if n == 0 {
            continue;
        }
        // log weights: baseline λ = 1, others λ = e^t
        let w: Vec<f64> = (0..lz.len())
            .map(|c| lz[c] + if c == b { 0.0 } else { t.iter().find(|(cc, _)| *cc == c).unwrap().1 })
            .collect();
        let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + w.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        l += ln_factorial(n);
        for (c, &yc) in y.iter().enumerate() {
            l += yc as f64 * (w[c] - lse) - ln_factorial(yc);
        }
    }
    l
}

fn multinomial_group(
    model: &GammaPoissonModel,
    params: &GammaPoissonParams,
    gd: &GroupData,
    tol: f64,
) -> Result<LogIntegral> {
    let dims: Vec<(usize, f64)> =
        model.non_baseline().iter().enumerate().map(|(k, &c)| (c, 1.0 / params.beta[k])).collect();
    let b = model.baseline();
    let worst = std::cell::Cell::new(0.0f64);
    let failed = std::cell::Cell::new(None::<f64>);

    // innermost dimension last; each level integrates out one λ
    fn nest(
        dims: &[(usize, f64)],
        fixed: &[(usize, f64)],
        gd: &GroupData,
        b: usize,
        tol: f64,
        worst: &std::cell::Cell<f64>,
        failed: &std::cell::Cell<Option<f64>>,
    ) -> f64 {
        let Some(&(c, a)) = dims.first() else {
            return multinomial_loglik(gd, b, fixed);
        };
        let g = |t: f64| {
            let mut inner = fixed.to_vec();
            inner.push((c, t));
            log_prior(a, t) + nest(&dims[1..], &inner, gd, b, tol, worst, failed)
        };
        match log_integrate(&g, T_LO, T_HI, tol) {
            Ok(li) => {
                worst.set(worst.get().max(li.rel_error));
                li.value
            }
            Err(Error::Quadrature { achieved }) => {
                failed.set(Some(achieved));
                f64::NAN
            }
            Err(_) => f64::NAN,
        }
    }

    let value = nest(&dims, &[], gd, b, tol, &worst, &failed);
    if let Some(achieved) = failed.get() {
        return Err(Error::Quadrature { achieved });
    }
    Ok(LogIntegral { value, rel_error: worst.get() * dims.len() as f64 })
}

/// Posterior means E[λ_iq | y] by quadrature (groups × categories).
pub fn quadrature_posterior_mean(
    ds: &Dataset,
    spec: &ModelSpec,
    params: &GammaPoissonParams,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let model = GammaPoissonModel::new(ds, spec)?;
    model.validate(params)?;
    let mut out = DMatrix::from_element(model.n_groups(), model.n_categories(), 1.0);
    for i in 0..model.n_groups() {
        let gd = group_data(&model, params, i);
        for (k, &c) in model.non_baseline().iter().enumerate() {
            let a = 1.0 / params.beta[k];
            let g = |t: f64| {
                log_prior(a, t)
                    + gd.log_rate.iter().zip(&gd.counts).map(|(lr, y)| poisson_term(y[c], lr[c] + t)).sum::<f64>()
            };
            let num = log_integrate(&|t| g(t) + t, T_LO, T_HI, tol)?;
            let den = log_integrate(&g, T_LO, T_HI, tol)?;
            out[(i, c)] = (num.value - den.value).exp();
        }
    }
    Ok(out)
}

/// log P(Y_2 = y2 | n) for one observation with two categories when the
/// non-baseline weight carries λ ~ Gamma(1/β, 1/β): p_2 = λζ/(1 + λζ).
///
/// Uses 1/(1+λζ)^n = Γ(n)⁻¹ ∫ s^{n−1} e^{−s(1+λζ)} ds to integrate λ out
/// analytically, leaving a one-dimensional integral over s that shares no
/// code path with the nested λ quadrature.
pub fn mixed_binomial_log_prob(y1: u64, y2: u64, zeta: f64, beta: f64, tol: f64) -> Result<f64> {
    let n = y1 + y2;
    if n == 0 {
        return Ok(0.0);
    }
    let a = 1.0 / beta;
    let (nf, y2f) = (n as f64, y2 as f64);
    // (a + ζs)^{−(y2+a)} = a^{−(y2+a)} (1 + ζs/a)^{−(y2+a)}; the a-powers
    // combine with a^a Γ(y2+a)/Γ(a) into Π_{k<y2} (1 + k/a)
    let g = |u: f64| nf * u - u.exp() - (y2f + a) * (zeta * u.exp() / a).ln_1p();
    let li = log_integrate(&g, -60.0, 60.0, tol)?;
    let rising: f64 = (0..y2).map(|k| (k as f64 / a).ln_1p()).sum();
    Ok(ln_factorial(n) - ln_factorial(y1) - ln_factorial(y2) + y2f * zeta.ln() + rising - ln_gamma(nf) + li.value)
}
