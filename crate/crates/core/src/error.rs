use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("singular linear system in {op}; use a positive ridge lambda")]
    Singular { op: &'static str },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite value at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's error document.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::BadLength { .. } => "shape",
            Error::NonFinite { .. } | Error::Diverged { .. } => "non_finite",
            Error::NotScalar { .. } => "not_scalar",
            Error::Singular { .. } => "singular",
            Error::MissingParam(_) => "missing_param",
            Error::Empty(_) | Error::Invalid(_) => "invalid",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
