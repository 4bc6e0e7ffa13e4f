use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain where the model is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Integration step too coarse for the fastest rate in the problem.
    #[error("step size {dt:e} s is too large; use dt <= {suggested:e} s")]
    StepSize { dt: f64, suggested: f64 },

    /// Two inputs that must share a grid or shape do not.
    #[error("format mismatch: {0}")]
    Format(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    /// Not enough data to determine the requested quantity.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A fit could not find a resonance / decay in the data.
    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        field,
        reason: reason.into(),
    }
}
