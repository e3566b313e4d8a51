use thiserror::Error;

/// Errors produced by the defcor library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {a} vs {b}")]
    ShapeMismatch {
        context: &'static str,
        a: String,
        b: String,
    },

    #[error("dimensions {w}x{h} not divisible by {factor} ({context})")]
    NonDivisible {
        context: &'static str,
        w: usize,
        h: usize,
        factor: usize,
    },

    #[error("{0}")]
    InvalidInput(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, a: impl ToString, b: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            a: a.to_string(),
            b: b.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
