use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A column named by the schema is missing, or a header is malformed.
    #[error("schema error: {0}")]
    Schema(String),

    /// The data violate a dataset invariant (negative counts, incomplete observations, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// The model specification is inconsistent with itself or with the data.
    #[error("model spec error: {0}")]
    Spec(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A structural design column is a linear combination of earlier columns.
    #[error("aliasing: column `{column}` is linearly dependent on earlier columns")]
    Aliasing { column: String },

    #[error("no convergence after {iterations} iterations: {reason}")]
    NonConvergence {
        iterations: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("prediction error: {0}")]
    Prediction(String),

    #[error("quadrature did not reach tolerance (estimated relative error {achieved:.3e})")]
    Quadrature { achieved: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Validation(_) => "validation",
            Error::Spec(_) => "spec",
            Error::Domain(_) => "domain",
            Error::Aliasing { .. } => "aliasing",
            Error::NonConvergence { .. } => "non-convergence",
            Error::Prediction(_) => "prediction",
            Error::Quadrature { .. } => "quadrature",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
