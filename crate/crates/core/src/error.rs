use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),
    #[error("graph convolution over an empty node set")]
    EmptyGraph,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("timestamp ordering error at line {line}: {msg}")]
    Ordering { line: usize, msg: String },
    #[error("synthetic generator error: {0}")]
    Generator(String),
    #[error("{what} index {index} out of range (valid: 0..{len})")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite loss at batch {batch} (last finite loss {last_finite})")]
    NonFiniteLoss { batch: usize, last_finite: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
