use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite or out-of-domain value {value} at index {index}")]
    Numeric {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{0}")]
    Contract(String),

    #[error("config: {0}")]
    Config(String),

    #[error("index {index} out of range (limit {limit}) in {context}")]
    Index {
        context: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("{file}: {message} (at byte offset {offset})")]
    Ingest {
        file: String,
        offset: usize,
        message: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors a caller should report as bad configuration
    /// rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
