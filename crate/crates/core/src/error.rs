use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmdError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("domain too small: site {site} has coordinate {coord} outside [-{half_width}, {half_width}]")]
    DomainTooSmall {
        site: usize,
        coord: f64,
        half_width: f64,
    },

    #[error("position of site {site} lies outside the closed domain")]
    OutsideDomain { site: usize },

    #[error("invalid separation r = {0}; pair potentials need r > 0")]
    InvalidSeparation(f64),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported estimator: {0}")]
    UnsupportedEstimator(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("numerical failure at iteration {iteration}: {message}")]
    NumericalFailure {
        iteration: usize,
        message: String,
        iterate: Vec<f64>,
    },

    #[error("rate overflow on edge ({i}, {j}): beta*(f_i - f_j) = {exponent}")]
    RateOverflow { i: usize, j: usize, exponent: f64 },

    #[error("oracle too large: {0}")]
    OracleTooLarge(String),

    #[error("chemical potential root solve failed after {iterations} iterations (residual {residual:e})")]
    RootFailure { iterations: usize, residual: f64 },

    #[error("at t = {t}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<DmdError>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DmdError>;
