mod common;

use common::{grouped_config, yogurt, yogurt_spec};
use poisson_trick::data::RawValue;
use poisson_trick::design::CovariateProfile;
use poisson_trick::ecm::{fit_ecm, EcmOptions, GammaPoissonFit};
use poisson_trick::oracle::simulate;
use poisson_trick::predict::{ebp_for_group, ebp_lambda, fitted_values, population_mean, predict};
use poisson_trick::Error;

fn small_fit(beta: Option<Vec<f64>>, seed: u64) -> (poisson_trick::data::Dataset, GammaPoissonFit) {
    let cfg = grouped_config(30, 4, 3, beta, seed);
    let ds = simulate(&cfg).unwrap();
    let opts = EcmOptions { standard_errors: false, ..EcmOptions::default() };
    let fit = fit_ecm(&ds, &cfg.spec.clone().with_gamma_effects(), &opts).unwrap();
    (ds, fit)
}

#[test]
fn fitted_values_reproduce_observation_totals() {
    let (ds, fit) = small_fit(Some(vec![0.5, 1.0]), 41);
    let pred = predict(&fit, &ds).unwrap();
    let q = ds.n_categories();
    for j in 0..ds.n_obs() {
        let s: f64 = pred.fitted[j * q..(j + 1) * q].iter().sum();
        let y = ds.obs_total(j) as f64;
        assert!((s - y).abs() < 1e-6 * y.max(1.0), "observation {j}: {s} vs {y}");
    }
    assert!(pred.fitted.iter().all(|f| *f >= 0.0));
    assert!(pred.lambda_ebp.column(0).iter().all(|l| *l == 1.0));
    assert_eq!(fitted_values(&fit, &ds).unwrap(), pred.fitted);
}

#[test]
fn unit_effects_reduce_to_fixed_fitted_values() {
    let (ds, mut fit) = small_fit(Some(vec![0.5, 1.0]), 42);
    fit.params.beta = vec![1e-12; 2];
    let pred = predict(&fit, &ds).unwrap();
    assert!(pred.lambda_ebp.iter().all(|l| (l - 1.0).abs() < 1e-9));
}

#[test]
fn unknown_group_points_to_population_mean() {
    let (ds, fit) = small_fit(Some(vec![0.5, 1.0]), 43);
    let err = ebp_for_group(&fit, "nobody").unwrap_err();
    assert!(matches!(&err, Error::Prediction(m) if m.contains("population_mean")));
    let row = ebp_for_group(&fit, &fit.group_ids[2]).unwrap();
    let all = ebp_lambda(&fit, &ds).unwrap();
    assert_eq!(row, all.row(2).iter().copied().collect::<Vec<_>>());
}

#[test]
fn population_mean_is_free_of_the_variance() {
    let (_, mut fit) = small_fit(Some(vec![0.5, 1.0]), 44);
    let profile = CovariateProfile::new().shared("x", RawValue::Num(0.0));
    let base = population_mean(&fit, &profile, 1.0).unwrap();
    let g = &fit.params.gamma;
    // at x = 0 only the intercepts act: ζ = (1, e^γ1, e^γ2)
    assert!((base[0] - 1.0).abs() < 1e-12);
    assert!((base[1] - g[0].exp()).abs() < 1e-12 && (base[2] - g[1].exp()).abs() < 1e-12);
    for b in [0.1, 1.0, 10.0] {
        fit.params.beta = vec![b; 2];
        assert_eq!(population_mean(&fit, &profile, 1.0).unwrap(), base);
    }
    assert!(matches!(population_mean(&fit, &profile, -1.0), Err(Error::Domain(_))));
}

#[test]
fn yogurt_fitted_shares_match_market_shares() {
    let ds = yogurt();
    let opts = EcmOptions { standard_errors: false, ..EcmOptions::default() };
    let fit = fit_ecm(&ds, &yogurt_spec().with_gamma_effects(), &opts).unwrap();
    let fitted = fitted_values(&fit, &ds).unwrap();
    let total: f64 = (0..ds.n_obs()).map(|j| ds.obs_total(j) as f64).sum();
    let q = ds.n_categories();
    // hiland, dannon, weight, yoplait
    let want = [0.03, 0.40, 0.23, 0.34];
    for (c, w) in want.iter().enumerate() {
        let share: f64 = (0..ds.n_obs()).map(|j| fitted[j * q + c]).sum::<f64>() / total;
        assert!((share - w).abs() < 0.01, "{}: {share}", ds.category_labels()[c]);
    }
}
