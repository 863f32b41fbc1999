use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Covariance matrix could not be factorized even after the largest jitter.
    #[error("conditioning failure ({reason}); attempted jitter {jitter:e}")]
    Conditioning { jitter: f64, reason: String },

    #[error("posterior variance {value:e} is negative beyond round-off")]
    NegativeVariance { value: f64 },

    #[error("hyperparameter fitting failed: {0}")]
    FittingFailed(String),

    #[error("kernel selection failed: {0}")]
    SelectionFailed(String),

    /// Output variance is zero or negative, so variance ratios are undefined.
    #[error("degenerate model output: variance {variance:e}")]
    DegenerateOutput { variance: f64 },

    #[error("log target is -inf at the initial state")]
    InvalidInitialState,

    #[error("density underflow at {0:?}")]
    DensityUnderflow(Vec<f64>),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
