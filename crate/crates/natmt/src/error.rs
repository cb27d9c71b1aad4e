//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value detected in {what}")]
    NotFinite { what: String },
    #[error("index {index} out of bounds for dimension of size {size} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("empty axis in {op}")]
    EmptyAxis { op: &'static str },
}

/// Errors raised by corpus ingestion and batching.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    Empty,
    #[error("sentence {index} has {len} tokens, exceeding the batch budget of {max} tokens")]
    SentenceTooLong {
        index: usize,
        len: usize,
        max: usize,
    },
    #[error("corpus line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("source has {src} sentences but target has {tgt}")]
    LengthMismatch { src: usize, tgt: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by phrase-table construction and parsing.
#[derive(Debug, Error)]
pub enum TableError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty phrase table")]
    EmptyTable,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised during model construction, training and inference.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),
    #[error("training diverged ({component} is not finite) at step {step}")]
    Diverged { component: String, step: u64 },
    #[error("missing resource for decoder-input method {method}: {resource}")]
    MissingResource {
        method: &'static str,
        resource: &'static str,
    },
    #[error("window half-width B={b} requires a teacher model for rescoring")]
    TeacherRequired { b: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by evaluation routines.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    Empty,
    #[error("hypothesis count {hyps} does not match reference count {refs}")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("bucket edges must be strictly increasing")]
    BadBuckets,
}
