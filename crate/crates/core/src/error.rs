use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input that is structurally valid but mathematically degenerate
    /// (zero membership vectors, all-identical loss samples, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Array or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A non-finite value appeared during numeric evaluation. The context
    /// names the view and layer (or computation) that produced it.
    #[error("numeric failure in {context}")]
    Numeric { context: String },

    /// A metric is undefined for the given input (e.g. a class is absent).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Configuration file or key problems.
    #[error("config error: {0}")]
    Config(String),

    /// CSV / dataset parsing problems, pointing at the offending location.
    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
