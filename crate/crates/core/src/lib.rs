//! Multinomial regression fitted through Poisson surrogate models.
//!
//! Fixed-effects multinomial models are fitted exactly as Poisson log-linear
//! models with per-observation constants ([`fixed`]); grouped responses get
//! multiplicative Gamma random effects with a closed-form marginal likelihood
//! fitted by ECM ([`gamma_poisson`], [`ecm`]).

pub mod data;
pub mod design;
pub mod ecm;
pub mod error;
pub mod fixed;
pub mod gamma_poisson;
pub mod glm;
pub mod oracle;
pub mod predict;
pub mod special;

pub use error::{Error, Result};
