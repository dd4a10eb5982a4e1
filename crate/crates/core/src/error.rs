use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the stage that produced them so that callers (the
/// CLI in particular) can map them onto an exit-code category.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix {name} is not Schur stable (spectral radius {radius:.6})")]
    Unstable { name: String, radius: f64 },

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("data: {0}")]
    Data(#[from] DataError),

    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),

    #[error("QP: {0}")]
    Qp(String),

    #[error("initial problem infeasible: violated {violated:?}")]
    InitialInfeasible { violated: Vec<String> },

    #[error("configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Failures loading or validating trajectory datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("expected {what} = {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("ragged dataset: trajectory {trajectory} has {found} steps, expected {expected}")]
    Ragged {
        trajectory: usize,
        expected: usize,
        found: usize,
    },

    #[error("datasets are not sample-aligned: {0}")]
    Misaligned(String),

    #[error("split needs {needed} trajectories but dataset has {available}")]
    SplitTooLarge { needed: usize, available: usize },

    #[error("dataset is empty")]
    Empty,

    #[error("missing dataset file {0}")]
    Missing(String),
}

/// Failures while fitting or calibrating confidence regions.
#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("insufficient calibration samples: have {available}, need at least {needed}")]
    InsufficientSamples { available: usize, needed: usize },

    #[error(
        "PAC tightening infeasible: level {level} drops to {tightened:.5}; need at least {needed} samples"
    )]
    PacInfeasible {
        level: f64,
        tightened: f64,
        needed: usize,
    },

    #[error("need at least {needed} fit trajectories for an invertible covariance, have {available}; consider more data or regularization")]
    TooFewFitSamples { available: usize, needed: usize },

    #[error("time index {t} outside 1..={horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },

    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(context: &str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Dimension {
        context: context.to_string(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
