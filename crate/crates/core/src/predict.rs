//! Empirical best predictors of the random effects and fitted values.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::design::CovariateProfile;
use crate::ecm::GammaPoissonFit;
use crate::error::{Error, Result};
use crate::gamma_poisson::GammaPoissonModel;

#[derive(Debug, Clone)]
pub struct Prediction {
    /// λ̂_iq, groups × categories; the baseline column is 1.
    pub lambda_ebp: DMatrix<f64>,
    /// Ŷ_ijq = δ̂_ij λ̂_iq ζ̂_ijq per long row.
    pub fitted: Vec<f64>,
}

fn training_model(fit: &GammaPoissonFit, ds: &Dataset) -> Result<GammaPoissonModel> {
    let model = GammaPoissonModel::new(ds, &fit.spec)?;
    if model.group_ids() != fit.group_ids.as_slice() || model.n_obs() != fit.params.delta.len() {
        return Err(Error::Prediction(
            "data differ from the training data; use population_mean for new groups".into(),
        ));
    }
    Ok(model)
}

/// Posterior means of λ with the estimates plugged in.
pub fn ebp_lambda(fit: &GammaPoissonFit, ds: &Dataset) -> Result<DMatrix<f64>> {
    Ok(training_model(fit, ds)?.e_step(&fit.params)?.0)
}

/// λ̂ of a single training group.
pub fn ebp_for_group(fit: &GammaPoissonFit, group_id: &str) -> Result<Vec<f64>> {
    let i = fit.group_ids.iter().position(|g| g == group_id).ok_or_else(|| {
        Error::Prediction(format!("group `{group_id}` was not in the training data; use population_mean"))
    })?;
    Ok(fit.lambda_hat.row(i).iter().copied().collect())
}

pub fn fitted_values(fit: &GammaPoissonFit, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(predict(fit, ds)?.fitted)
}

pub fn predict(fit: &GammaPoissonFit, ds: &Dataset) -> Result<Prediction> {
    let model = training_model(fit, ds)?;
    let (lambda, _) = model.e_step(&fit.params)?;
    let q = model.n_categories();
    let zeta = model.zeta(&fit.params.gamma);
    let mut fitted = vec![0.0; zeta.len()];
    for (i, members) in model.groups().iter().enumerate() {
        for &j in members {
            for c in 0..q {
                fitted[j * q + c] = fit.params.delta[j] * lambda[(i, c)] * zeta[j * q + c];
            }
        }
    }
    Ok(Prediction { lambda_ebp: lambda, fitted })
}

/// Expected counts δ ζ_q for a group outside the data (E λ = 1).
pub fn population_mean(fit: &GammaPoissonFit, profile: &CovariateProfile, delta: f64) -> Result<Vec<f64>> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be non-negative, got {delta}")));
    }
    let x = fit.encoder.encode_profile(profile)?;
    Ok((x * &fit.params.gamma).iter().map(|e| delta * e.exp()).collect())
}
