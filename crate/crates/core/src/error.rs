use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("node index {index} out of range for a graph with {num_nodes} nodes (line {line})")]
    IndexOutOfRange {
        index: usize,
        num_nodes: usize,
        line: usize,
    },

    #[error("inconsistent feature dimension at line {line}: expected {expected}, found {found}")]
    FeatureDim {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("stratification failed: class {class} has only {count} labeled nodes (need at least 3)")]
    Stratification { class: usize, count: usize },

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("backward: {0}")]
    Backward(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::FeatureDim { .. } => "feature-dim",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Stratification { .. } => "stratification",
            Error::Sampling(_) => "sampling",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::Backward(_) => "backward",
            Error::Empty(_) => "empty",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
