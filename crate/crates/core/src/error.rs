use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus empty after filtering")]
    EmptyAfterFiltering,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bag-of-words record {record}: {message}")]
    BowRecord { record: usize, message: String },

    #[error("empty document")]
    EmptyDocument,

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("truncated checkpoint")]
    TruncatedCheckpoint,

    #[error("not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("dimension mismatch: {what} is {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        found: usize,
        expected: usize,
    },

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite {what} in epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("topic {topic} has zero probability mass over the vocabulary")]
    ZeroMassTopic { topic: usize },

    #[error("cannot form {k} clusters from {n} documents")]
    TooManyClusters { k: usize, n: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}
