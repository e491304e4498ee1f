use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poisson_trick::data::{Dataset, RawValue};
use poisson_trick::design::{CovariateProfile, Encoder, ModelSpec, Term};
use poisson_trick::fixed::{fit_fixed, multinomial_loglik_at, predict_probabilities, profiled_surrogate_loglik_at};
use poisson_trick::oracle::{direct_multinomial_mle, simulate, SimCovariate, SimulationConfig};

fn dataset(seed: u64, q: usize, n: usize) -> (Dataset, ModelSpec) {
    let mut cfg = SimulationConfig::new(n, 1, q, seed);
    cfg.covariates = vec![
        SimCovariate::normal("x", 0.0, 1.0),
        SimCovariate::categorical("f", 2),
        SimCovariate::normal("price", 1.0, 0.3).per_category(),
    ];
    cfg.spec = ModelSpec::new(vec![Term::specific("x"), Term::specific("f"), Term::generic("price")]);
    let k = cfg.coefficient_names().unwrap().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.gamma = (0..k).map(|_| rng.random_range(-0.6..0.6)).collect();
    cfg.delta = 3.0;
    (simulate(&cfg).unwrap(), cfg.spec)
}

#[test]
fn surrogate_and_multinomial_likelihoods_differ_by_a_constant() {
    let (ds, spec) = dataset(1, 3, 50);
    let enc = Encoder::new(&ds, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gaps: Vec<f64> = (0..5)
        .map(|_| {
            let g: Vec<f64> = (0..enc.n_columns()).map(|_| rng.random_range(-1.0..1.0)).collect();
            multinomial_loglik_at(&ds, &enc, &g) - profiled_surrogate_loglik_at(&ds, &enc, &g)
        })
        .collect();
    for g in &gaps {
        assert!((g - gaps[0]).abs() < 1e-9 * gaps[0].abs().max(1.0), "{gaps:?}");
    }
}

#[test]
fn constants_recover_observation_totals() {
    let (ds, spec) = dataset(3, 4, 60);
    let fit = fit_fixed(&ds, &spec).unwrap();
    let eta = fit.encoder.encode_dataset(&ds) * nalgebra::DVector::from_column_slice(&fit.gamma);
    let q = ds.n_categories();
    for j in 0..ds.n_obs() {
        let zeta_sum: f64 = (0..q).map(|c| eta[j * q + c].exp()).sum();
        let total = ds.obs_total(j) as f64;
        assert!((fit.delta_hat[j] * zeta_sum - total).abs() < 1e-9 * total.max(1.0), "observation {j}");
    }
    let fitted_totals: Vec<f64> = (0..ds.n_categories())
        .map(|c| (0..ds.n_obs()).map(|j| fit.fitted_probabilities[j][c] * ds.obs_total(j) as f64).sum())
        .collect();
    // intercept score equations: fitted category totals equal observed ones
    for (c, t) in ds.category_totals().iter().enumerate() {
        assert!((fitted_totals[c] - *t as f64).abs() < 1e-6, "category {c}");
    }
}

#[test]
fn probabilities_do_not_depend_on_the_baseline() {
    let (ds, spec) = dataset(4, 3, 80);
    let a = fit_fixed(&ds, &spec).unwrap();
    let b = fit_fixed(&ds, &spec.clone().with_baseline("3")).unwrap();
    assert!((a.multinomial_loglik - b.multinomial_loglik).abs() < 1e-9);
    let profile = CovariateProfile::new()
        .shared("x", RawValue::Num(0.7))
        .shared("f", RawValue::Level("L1".into()))
        .per_category("price", vec![RawValue::Num(0.9), RawValue::Num(1.2), RawValue::Num(1.0)]);
    let (pa, pb) = (predict_probabilities(&a, &profile).unwrap(), predict_probabilities(&b, &profile).unwrap());
    assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (x, y) in pa.iter().zip(&pb) {
        assert!((x - y).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn surrogate_fit_is_the_multinomial_mle(seed in 0u64..10_000, q in 2usize..=4, n in 40usize..=90) {
        let (ds, spec) = dataset(seed, q, n);
        let fit = fit_fixed(&ds, &spec).unwrap();
        let direct = direct_multinomial_mle(&ds, &spec).unwrap();
        for (a, b) in fit.gamma.iter().zip(&direct.gamma) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in fit.se.iter().zip(&direct.se) {
            prop_assert!(((a - b) / b).abs() < 1e-4);
        }
    }
}
