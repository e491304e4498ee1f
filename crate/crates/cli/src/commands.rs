use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::Serialize;

use poisson_trick::data::{ingest_csv, Dataset};
use poisson_trick::design::{Encoder, ModelSpec};
use poisson_trick::ecm::{fit_ecm, EcmOptions, GammaPoissonFit};
use poisson_trick::fixed::{fit_fixed_with, multinomial_loglik_at, FixedFit};
use poisson_trick::glm::IrlsOptions;
use poisson_trick::oracle::{
    direct_multinomial_mle, factorized_loglik, quadrature_marginal, quadrature_posterior_mean, simulate,
    MixtureModel, SimCovariate, SimCovariateKind, SimulationConfig,
};
use poisson_trick::predict::predict;
use poisson_trick::gamma_poisson::GammaPoissonModel;
use poisson_trick::{Error, Result};

use crate::args::{ConvertArgs, DataArgs, FitArgs, GpArgs, Layout, SimulateArgs};
use crate::report::{emit, opt_sig6, reals, sig6, Real, Table};

/// What a command achieved; non-convergence still produces output.
pub enum Outcome {
    Done,
    NotConverged(String),
    /// `verify` found at least one oracle mismatch.
    Mismatch(usize),
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let ds = ingest_csv(&data.data, data.layout(), &data.schema())?;
    info!("read {} observations in {} categories", ds.n_obs(), ds.n_categories());
    Ok(ds)
}

pub fn convert(args: &ConvertArgs) -> Result<Outcome> {
    let ds = load(&args.data)?;
    let out = writer(args.output.as_deref())?;
    match args.to {
        Layout::Short => ds.write_short_csv(out)?,
        Layout::Long => ds.write_long_csv(out)?,
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct Coefficient {
    name: String,
    estimate: Real,
    std_error: Real,
    z: Real,
}

#[derive(Serialize)]
struct ModelInfo {
    categories: Vec<String>,
    baseline: String,
    /// Covariate name and its reference level.
    reference_levels: Vec<(String, String)>,
    n_obs: usize,
}

fn model_info(enc: &Encoder, ds: &Dataset) -> ModelInfo {
    ModelInfo {
        categories: enc.categories().to_vec(),
        baseline: enc.categories()[enc.baseline()].clone(),
        reference_levels: enc.reference_levels(),
        n_obs: ds.n_obs(),
    }
}

fn info_meta(t: &mut Table, info: &ModelInfo) {
    t.meta("categories", info.categories.join(","));
    t.meta("baseline", &info.baseline);
    for (cov, level) in &info.reference_levels {
        t.meta(&format!("reference level of {cov}"), level);
    }
    t.meta("observations", info.n_obs);
}

#[derive(Serialize)]
struct FixedReport {
    model: &'static str,
    #[serde(flatten)]
    info: ModelInfo,
    loglik: Real,
    surrogate_poisson_loglik: Real,
    iterations: usize,
    tol: f64,
    converged: bool,
    separated: Vec<String>,
    coefficients: Vec<Coefficient>,
}

fn irls_options(args: &crate::args::ModelArgs) -> IrlsOptions {
    let d = IrlsOptions::default();
    IrlsOptions { tol: args.tol.unwrap_or(d.tol), max_iter: args.max_iter.unwrap_or(d.max_iter), ..d }
}

pub fn fit_fixed_cmd(args: &FitArgs) -> Result<Outcome> {
    args.model.validate()?;
    let ds = load(&args.data)?;
    let spec = args.model.spec(args.data.baseline.as_deref())?;
    let opts = irls_options(&args.model);
    let fit = fit_fixed_with(&ds, &spec, &opts)?;
    let report = fixed_report(&fit, &ds, opts.tol);
    emit(args.output.output_format, &report, || fixed_table(&report), writer(args.output.output.as_deref())?)?;
    Ok(if fit.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged(format!("IRLS stopped after {} iterations", fit.iterations))
    })
}

fn fixed_report(fit: &FixedFit, ds: &Dataset, tol: f64) -> FixedReport {
    FixedReport {
        model: "fixed",
        info: model_info(&fit.encoder, ds),
        loglik: Real(fit.multinomial_loglik),
        surrogate_poisson_loglik: Real(fit.poisson_loglik),
        iterations: fit.iterations,
        tol,
        converged: fit.converged,
        separated: fit.separated_labels().into_iter().map(String::from).collect(),
        coefficients: fit
            .names
            .iter()
            .zip(fit.gamma.iter().zip(&fit.se))
            .map(|(n, (&g, &s))| Coefficient { name: n.clone(), estimate: Real(g), std_error: Real(s), z: Real(g / s) })
            .collect(),
    }
}

fn fixed_table(r: &FixedReport) -> Table {
    let mut t = Table::new(&["parameter", "estimate", "std_error", "z"]);
    t.meta("model", r.model);
    info_meta(&mut t, &r.info);
    t.meta("loglik", sig6(r.loglik.0));
    t.meta("iterations", r.iterations);
    t.meta("tol", sig6(r.tol));
    t.meta("converged", r.converged);
    if !r.separated.is_empty() {
        t.meta("separated", r.separated.join(","));
    }
    for c in &r.coefficients {
        t.rows.push(vec![c.name.clone(), sig6(c.estimate.0), sig6(c.std_error.0), sig6(c.z.0)]);
    }
    t
}

#[derive(Serialize)]
struct GpCoefficient {
    name: String,
    estimate: Real,
    /// From the joint observed information in (γ, log β).
    std_error: Option<Real>,
    /// With the other parameter block held at its estimate.
    std_error_conditional: Option<Real>,
    z: Option<Real>,
}

#[derive(Serialize)]
struct Variance {
    category: String,
    beta: Real,
    std_error: Option<Real>,
    std_error_conditional: Option<Real>,
    /// Wald statistic ln β / SE(ln β).
    z_log_beta: Option<Real>,
    fixed: bool,
}

#[derive(Serialize)]
struct GpReport {
    model: &'static str,
    #[serde(flatten)]
    info: ModelInfo,
    n_groups: usize,
    loglik: Real,
    iterations: usize,
    tol: f64,
    converged: bool,
    max_gradient: Option<Real>,
    degenerate_beta: Vec<String>,
    coefficients: Vec<GpCoefficient>,
    variances: Vec<Variance>,
    loglik_trace: Vec<Real>,
}

fn ecm_options(args: &GpArgs, n_beta: usize) -> Result<EcmOptions> {
    args.model.validate()?;
    if !(args.initial_beta > 0.0 && args.initial_beta.is_finite()) {
        return Err(Error::Validation(format!("--initial-beta must be positive, got {}", args.initial_beta)));
    }
    let d = EcmOptions::default();
    let fixed_beta = match (args.fix_beta.as_slice(), n_beta) {
        ([], _) => None,
        ([b], k) => Some(vec![*b; k]),
        (bs, _) => Some(bs.to_vec()),
    };
    if let Some(fb) = &fixed_beta {
        if let Some(b) = fb.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::Validation(format!("--fix-beta values must be positive, got {b}")));
        }
    }
    Ok(EcmOptions {
        tol: args.model.tol.unwrap_or(d.tol),
        max_iter: args.model.max_iter.unwrap_or(d.max_iter),
        initial_beta: args.initial_beta,
        fixed_beta,
        standard_errors: !args.no_se,
        ..d
    })
}

fn fit_gp(args: &GpArgs, ds: &Dataset, standard_errors: bool) -> Result<(GammaPoissonFit, EcmOptions)> {
    let spec: ModelSpec = args.model.spec(args.data.baseline.as_deref())?.with_gamma_effects();
    let mut opts = ecm_options(args, ds.n_categories() - 1)?;
    opts.standard_errors &= standard_errors;
    Ok((fit_ecm(ds, &spec, &opts)?, opts))
}

fn gp_report(fit: &GammaPoissonFit, ds: &Dataset, opts: &EcmOptions) -> GpReport {
    let pick = |se: &Option<poisson_trick::ecm::StandardErrors>, gamma: bool, k: usize| {
        se.as_ref().and_then(|s| if gamma { s.gamma.get(k) } else { s.beta.get(k) }).map(|v| Real(*v))
    };
    GpReport {
        model: "gamma-poisson",
        info: model_info(&fit.encoder, ds),
        n_groups: fit.group_ids.len(),
        loglik: Real(fit.loglik),
        iterations: fit.iterations,
        tol: fit.tol,
        converged: fit.converged,
        max_gradient: fit.max_gradient.map(Real),
        degenerate_beta: fit.degenerate_beta.clone(),
        coefficients: fit
            .names
            .iter()
            .enumerate()
            .map(|(k, n)| {
                let g = fit.params.gamma[k];
                let se = pick(&fit.se, true, k);
                GpCoefficient {
                    name: n.clone(),
                    estimate: Real(g),
                    std_error: se,
                    std_error_conditional: pick(&fit.se_conditional, true, k),
                    z: se.map(|s| Real(g / s.0)),
                }
            })
            .collect(),
        variances: fit
            .beta_labels
            .iter()
            .enumerate()
            .map(|(k, label)| Variance {
                category: label.clone(),
                beta: Real(fit.params.beta[k]),
                std_error: pick(&fit.se, false, k),
                std_error_conditional: pick(&fit.se_conditional, false, k),
                z_log_beta: fit
                    .se
                    .as_ref()
                    .and_then(|s| s.log_beta.get(k))
                    .map(|s| Real(fit.params.beta[k].ln() / s)),
                fixed: opts.fixed_beta.is_some(),
            })
            .collect(),
        loglik_trace: reals(&fit.trace),
    }
}

fn gp_meta(t: &mut Table, r: &GpReport) {
    t.meta("model", r.model);
    info_meta(t, &r.info);
    t.meta("groups", r.n_groups);
    t.meta("loglik", sig6(r.loglik.0));
    t.meta("iterations", r.iterations);
    t.meta("tol", sig6(r.tol));
    t.meta("converged", r.converged);
    if let Some(g) = r.max_gradient {
        t.meta("max gradient", sig6(g.0));
    }
    if !r.degenerate_beta.is_empty() {
        t.meta("variance at lower bound", r.degenerate_beta.join(","));
    }
}

fn gp_table(r: &GpReport) -> Table {
    let mut t = Table::new(&["parameter", "estimate", "std_error", "std_error_conditional", "z"]);
    gp_meta(&mut t, r);
    let o = |x: Option<Real>| opt_sig6(x.map(|v| v.0));
    for c in &r.coefficients {
        t.rows.push(vec![c.name.clone(), sig6(c.estimate.0), o(c.std_error), o(c.std_error_conditional), o(c.z)]);
    }
    for v in &r.variances {
        let name = if v.fixed { format!("beta[{}] (fixed)", v.category) } else { format!("beta[{}]", v.category) };
        t.rows.push(vec![name, sig6(v.beta.0), o(v.std_error), o(v.std_error_conditional), o(v.z_log_beta)]);
    }
    t
}

fn convergence(fit: &GammaPoissonFit) -> Outcome {
    if fit.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged(format!("ECM stopped after {} iterations (tol {:e})", fit.iterations, fit.tol))
    }
}

pub fn fit_gp_cmd(args: &GpArgs) -> Result<Outcome> {
    let ds = load(&args.data)?;
    let (fit, opts) = fit_gp(args, &ds, true)?;
    let report = gp_report(&fit, &ds, &opts);
    emit(args.output.output_format, &report, || gp_table(&report), writer(args.output.output.as_deref())?)?;
    Ok(convergence(&fit))
}

#[derive(Serialize)]
struct LambdaRow {
    group: String,
    category: String,
    lambda_ebp: Real,
}

#[derive(Serialize)]
struct FittedRow {
    group: String,
    obs: String,
    category: String,
    count: u64,
    fitted: Real,
}

#[derive(Serialize)]
struct PredictReport {
    fit: GpReport,
    lambda: Vec<LambdaRow>,
    fitted: Vec<FittedRow>,
}

pub fn predict_cmd(args: &GpArgs) -> Result<Outcome> {
    let ds = load(&args.data)?;
    let (fit, opts) = fit_gp(args, &ds, true)?;
    let pred = predict(&fit, &ds)?;
    let labels = ds.category_labels();
    let groups = ds.group_ids().expect("grouped data");
    let lambda = (0..groups.len())
        .flat_map(|i| {
            let pred = &pred;
            (0..labels.len()).map(move |c| LambdaRow {
                group: groups[i].clone(),
                category: labels[c].clone(),
                lambda_ebp: Real(pred.lambda_ebp[(i, c)]),
            })
        })
        .collect();
    let fitted = ds
        .records()
        .iter()
        .zip(&pred.fitted)
        .map(|(r, f)| FittedRow {
            group: groups[r.group].clone(),
            obs: ds.obs_ids()[r.obs].clone(),
            category: labels[r.category].clone(),
            count: r.count,
            fitted: Real(*f),
        })
        .collect();
    let report = PredictReport { fit: gp_report(&fit, &ds, &opts), lambda, fitted };
    let table = || {
        let mut t = Table::new(&["group", "obs", "category", "count", "fitted", "lambda_ebp"]);
        gp_meta(&mut t, &report.fit);
        for (r, row) in ds.records().iter().zip(&report.fitted) {
            t.rows.push(vec![
                row.group.clone(),
                row.obs.clone(),
                row.category.clone(),
                row.count.to_string(),
                sig6(row.fitted.0),
                sig6(pred.lambda_ebp[(r.group, r.category)]),
            ]);
        }
        t
    };
    emit(args.output.output_format, &report, table, writer(args.output.output.as_deref())?)?;
    Ok(convergence(&fit))
}

fn parse_variable(s: &str) -> Result<SimCovariate> {
    let mut parts = s.split(':');
    let name = parts.next().filter(|n| !n.is_empty());
    let kind = parts.next();
    let (Some(name), Some(kind)) = (name, kind) else {
        return Err(Error::Validation(format!("malformed --variable `{s}` (name:normal|uniform|levels=N)")));
    };
    let kind = match kind {
        "normal" => SimCovariateKind::Normal { mean: 0.0, sd: 1.0 },
        "uniform" => SimCovariateKind::Uniform { lo: 0.0, hi: 1.0 },
        k => match k.strip_prefix("levels=").map(str::parse::<usize>) {
            Some(Ok(levels)) => SimCovariateKind::Categorical { levels },
            _ => return Err(Error::Validation(format!("unknown covariate kind `{k}` in `{s}`"))),
        },
    };
    let varies_by_category = match parts.next() {
        None => false,
        Some("per-category") => true,
        Some(other) => return Err(Error::Validation(format!("unknown modifier `{other}` in `{s}`"))),
    };
    if parts.next().is_some() {
        return Err(Error::Validation(format!("malformed --variable `{s}`")));
    }
    Ok(SimCovariate { name: name.to_string(), kind, varies_by_category })
}

pub fn simulate_cmd(args: &SimulateArgs) -> Result<Outcome> {
    if args.n_categories < 2 {
        return Err(Error::Validation("--n-categories must be at least 2".into()));
    }
    let mut cfg = SimulationConfig::new(args.groups, args.obs_per_group, args.n_categories, args.seed);
    cfg.covariates = args.variables.iter().map(|v| parse_variable(v)).collect::<Result<_>>()?;
    cfg.spec = ModelSpec::new(args.covariates.iter().map(|s| s.parse()).collect::<Result<_>>()?);
    cfg.gamma = if args.gamma.is_empty() { vec![0.0; cfg.coefficient_names()?.len()] } else { args.gamma.clone() };
    cfg.beta = (!args.beta.is_empty()).then(|| args.beta.clone());
    cfg.delta = args.delta;
    let ds = simulate(&cfg)?;
    let out = writer(args.output.as_deref())?;
    match args.to {
        Layout::Short => ds.write_short_csv(out)?,
        Layout::Long => ds.write_long_csv(out)?,
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct Check {
    check: String,
    value: Real,
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    checks: Vec<Check>,
    passed: bool,
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn verify_cmd(args: &GpArgs) -> Result<Outcome> {
    let ds = load(&args.data)?;
    let mut checks = Vec::new();
    let mut push = |check: &str, value: f64, tolerance: f64| {
        checks.push(Check { check: check.into(), value: Real(value), tolerance, passed: value <= tolerance });
    };

    // fixed effects: surrogate against direct multinomial maximization
    args.model.validate()?;
    let spec = args.model.spec(args.data.baseline.as_deref())?;
    let fixed = fit_fixed_with(&ds, &spec, &irls_options(&args.model))?;
    if fixed.separated.is_empty() {
        let direct = direct_multinomial_mle(&ds, &spec)?;
        let coef = fixed.gamma.iter().zip(&direct.gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let se = fixed.se.iter().zip(&direct.se).map(|(a, b)| rel_gap(*a, *b)).fold(0.0, f64::max);
        push("fixed: max |gamma - direct MLE|", coef, 1e-6);
        push("fixed: max relative SE gap to direct MLE", se, 1e-4);
        let ll = multinomial_loglik_at(&ds, &fixed.encoder, &direct.gamma);
        push("fixed: relative log-likelihood gap", rel_gap(fixed.multinomial_loglik, ll), 1e-8);
    } else {
        info!("separated categories; skipping the direct-MLE comparison");
    }

    // Gamma-Poisson: closed forms against quadrature at the estimates
    let mut outcome = Outcome::Done;
    if ds.is_grouped() && !args.model.pooled {
        let (fit, _) = fit_gp(args, &ds, false)?;
        if !fit.converged {
            outcome = convergence(&fit);
        }
        let model = GammaPoissonModel::new(&ds, &fit.spec)?;
        let closed = model.marginal_loglik(&fit.params)?;
        let quad = quadrature_marginal(&ds, &fit.spec, &fit.params, MixtureModel::PoissonSurrogate, 1e-12)?;
        push("gamma-poisson: relative gap closed form vs quadrature", rel_gap(closed, quad.value), 1e-8);
        let factored = factorized_loglik(&model, &fit.params)?;
        push("gamma-poisson: relative gap closed form vs NB x multinomial", rel_gap(closed, factored), 1e-10);
        let ebp = model.e_step(&fit.params)?.0;
        let post = quadrature_posterior_mean(&ds, &fit.spec, &fit.params, 1e-12)?;
        push("gamma-poisson: max |EBP - quadrature posterior mean|", (&ebp - &post).amax(), 1e-8);
    }

    let failed = checks.iter().filter(|c| !c.passed).count();
    let report = VerifyReport { passed: failed == 0, checks };
    let table = || {
        let mut t = Table::new(&["check", "value", "tolerance", "status"]);
        t.meta("passed", report.passed);
        for c in &report.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            t.rows.push(vec![c.check.clone(), sig6(c.value.0), sig6(c.tolerance), status.into()]);
        }
        t
    };
    emit(args.output.output_format, &report, table, writer(args.output.output.as_deref())?)?;
    Ok(match outcome {
        Outcome::Done if failed > 0 => Outcome::Mismatch(failed),
        o => o,
    })
}
