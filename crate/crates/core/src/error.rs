use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {line}:{column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("no function bodies found")]
    EmptyDocument,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is smaller than the {minimum} specials and base symbols")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("token id {id} is not in a vocabulary of {size}")]
    UnknownId { id: u32, size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of range for vocabulary size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    LengthExceeded { len: usize, max_len: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("sequence has no maskable positions")]
    NothingToMask,
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("need at least two distinct groups, found {0}")]
    InsufficientGroups(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("index fingerprint {index} does not match model fingerprint {model}")]
    FingerprintMismatch { index: String, model: String },
    #[error("index is empty")]
    EmptyIndex,
    #[error("no items to evaluate")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("unknown document id {0}")]
    UnknownDocument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format { what, message: message.into() }
    }
}
