//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: id {id} out of range (limit {limit}) at position {position}")]
    Index {
        op: &'static str,
        id: usize,
        limit: usize,
        position: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("CTC target of length {target_len} not representable in {frames} frames (needs {required})")]
    InfeasibleTarget {
        target_len: usize,
        frames: usize,
        required: usize,
    },

    #[error("oracle scope exceeded: {0}")]
    OracleScope(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint incompatibility: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
