//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("fully masked attention row")]
    FullyMaskedRow,

    #[error("sequence too short: T={t} < kernel K={k}")]
    SequenceTooShort { t: usize, k: usize },

    #[error("too short after subsampling: T={0} < 7")]
    TooShortAfterSubsampling(usize),

    #[error("CTC infeasible: target needs {needed} frames, got {got}")]
    CtcInfeasible { needed: usize, got: usize },

    #[error("degenerate representation: zero-norm frame vector")]
    DegenerateRepresentation,

    #[error("no negatives available: utterance has a single frame")]
    NoNegatives,

    #[error("backward already run on this graph")]
    BackwardAlreadyRun,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
