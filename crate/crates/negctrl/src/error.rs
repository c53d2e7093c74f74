//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by data handling, model fitting, estimation and inference.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (data, formulas, flags, fixtures).
    #[error("validation error: {0}")]
    Validation(String),

    /// CSV parse failure with row and column context.
    #[error("row {row}, column `{column}`: {message}")]
    Cell {
        row: usize,
        column: String,
        message: String,
    },

    /// A formula references a covariate that does not exist.
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    /// A subsample or cell required by a fit is empty.
    #[error("empty cell {0}")]
    EmptyCell(String),

    /// Design or estimating-equation matrix is singular.
    #[error("rank deficiency in {0}")]
    RankDeficient(String),

    /// Logistic-type fit diverges.
    #[error("separation in {model}: coefficient of `{term}` diverged")]
    Separation { model: String, term: String },

    /// Iterative solver did not converge.
    #[error("{model} did not converge after {iterations} iterations (max |score| = {score:.3e})")]
    NonConvergence {
        model: String,
        iterations: usize,
        score: f64,
    },

    /// An inverse weight used a density below the configured floor.
    #[error("density floor {floor:e} breached at rows {rows:?}")]
    DensityFloor { floor: f64, rows: Vec<usize> },

    /// The W-on-Z contrast matrix is (nearly) singular.
    #[error("NCE-NCO association matrix is nearly singular (smallest singular value {0:.3e}); the negative controls carry too little information")]
    WeakNegativeControls(f64),

    /// Generic numerical failure (ill-conditioned sandwich, NaN, inconsistent system).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 2 for bad input, 3 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Cell { .. }
            | Error::UnknownCovariate(_)
            | Error::EmptyCell(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Validation(format!("csv: {e}"))
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
