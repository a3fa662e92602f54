use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schedule error: epoch {epoch} outside 1..={total}")]
    Schedule { epoch: usize, total: usize },

    #[error("divergence at t={last_stable_t}: {msg}")]
    Divergence { last_stable_t: f64, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid_dimension",
            Error::Config { .. } => "config",
            Error::Shape(_) => "shape",
            Error::Undefined(_) => "undefined",
            Error::Domain(_) => "domain",
            Error::Schedule { .. } => "schedule",
            Error::Divergence { .. } => "divergence",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
