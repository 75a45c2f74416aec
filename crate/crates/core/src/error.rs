use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} at index {index} is out of range for vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, index: usize, vocab_size: usize },

    #[error("invalid exit depth {depth}; valid exits are {valid:?}")]
    InvalidDepth { depth: usize, valid: Vec<usize> },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("no unmasked target positions; loss is undefined")]
    EmptyLoss,

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: not a checkpoint (bad magic)")]
    NotACheckpoint(PathBuf),

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("evaluation failed on instruction {index}: {message}")]
    Evaluation { index: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
