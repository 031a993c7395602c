use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories shared by every module.
///
/// The CLI maps these onto process exit codes, so new variants should be
/// placed into one of the existing buckets where possible.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("step size underflow at t = {t:.6e} (h = {step:.3e})")]
    Stiffness { t: f64, step: f64 },

    #[error("rejection sampler infeasible: acceptance rate {rate:.3e} after {proposals} proposals")]
    Infeasible { rate: f64, proposals: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}
