use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument outside its valid range (eps, p, tau, step...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Invalid configuration; `field` is the dotted path of the offending key.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Invalid runtime input (token id out of range, bad class id...).
    #[error("input error: {0}")]
    Input(String),

    /// API contract violated by the caller (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Training stopped because the loss or an update became non-finite.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
