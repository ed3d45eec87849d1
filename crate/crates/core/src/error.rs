use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown corpus id `{0}`")]
    UnknownCorpus(String),
    #[error("unregistered tag `{0}`")]
    UnknownTag(String),
    #[error("duplicate tag `{0}`")]
    DuplicateTag(String),
    #[error("record {index} has no url")]
    MissingUrl { index: usize },
    #[error("empty source")]
    EmptySource,
    #[error("empty target")]
    EmptyTarget,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("vocabulary size {requested} too small, need more than {required}")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("no loss tokens")]
    NoLossTokens,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("no checkpoints to average")]
    NoCheckpoints,
    #[error("checkpoint config hash mismatch: {expected:016x} vs {found:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

pub type Result<T> = core::result::Result<T, Error>;
