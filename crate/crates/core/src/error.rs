use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate function: every sampled value is +inf")]
    DegenerateFunction,

    #[error("refused: {0}")]
    Refused(String),

    #[error("time step {dt} exceeds the stability bound {bound}")]
    Cfl { dt: f64, bound: f64 },

    #[error("blow-up at step {step} (t = {time}): {reason}")]
    BlowUp { step: usize, time: f64, reason: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
