use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("stale perturbation cache: cached shape {cached:?}, activation shape {actual:?}")]
    StaleCache {
        cached: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training failed at iteration {iteration}: {source}")]
    Training {
        iteration: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by non-finite values, including those wrapped
    /// by the trainer.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Training { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
