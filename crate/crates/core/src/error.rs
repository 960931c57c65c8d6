use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("sparse update invariant violated: {0}")]
    InvariantViolation(String),

    #[error("buffer truncated: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),

    #[error("index {index} out of bounds for vector of length {len}")]
    IndexOutOfBounds { index: u32, len: usize },

    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: u32 },

    #[error("indices not strictly increasing at record {position}")]
    NonIncreasingIndex { position: usize },

    #[error("explicit zero value at index {index}")]
    ZeroValue { index: u32 },

    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("numeric overflow: component {index} became non-finite")]
    NumericOverflow { index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown worker {0}")]
    UnknownWorker(u32),

    #[error("worker {0} already registered")]
    DuplicateWorker(u32),

    #[error("run diverged at step {step} on worker {worker}")]
    Diverged { worker: u32, step: u64 },
}
