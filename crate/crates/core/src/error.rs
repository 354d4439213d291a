use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid space configuration: {0}")]
    InvalidSpace(String),
    #[error("operator is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error(
        "operator has eigenvalue {eigenvalue:.3e} below tolerance (largest {max_eigenvalue:.3e})"
    )]
    NegativeEigenvalue {
        eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("time {t} outside horizon [0, {horizon}]")]
    OutsideHorizon { t: f64, horizon: f64 },
    #[error("invalid driver: {0}")]
    InvalidDriver(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid spike: {0}")]
    InvalidSpike(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("state blew up on path {path} at step {step}")]
    BlowUp { path: usize, step: usize },
    #[error("noise bundle mismatch: {0}")]
    BundleMismatch(String),
    #[error("regression at step {step} is rank deficient (condition number {condition:.3e})")]
    RankDeficient { step: usize, condition: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed noise bundle file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
