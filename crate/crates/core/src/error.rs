use thiserror::Error;

/// Errors produced by the editing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient distinct patches: {distinct} distinct, {requested} requested")]
    InsufficientDistinctPatches { distinct: usize, requested: usize },
    #[error("token out of vocabulary: {token} >= {vocab}")]
    TokenOutOfVocabulary { token: u32, vocab: usize },
    #[error("odd rotary dimension {0}")]
    OddDimension(usize),
    #[error("text length {len} exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("unknown instruction word {0:?}")]
    UnknownWord(String),
    #[error("no masked tokens")]
    NoMaskedTokens,
    #[error("sampler already finished after {0} steps")]
    SamplerFinished(usize),
    #[error("rbf size limit: {h}x{w} exceeds 64x64")]
    RbfSizeLimit { h: usize, w: usize },
    #[error("NaN in checkpoint (tensor {0})")]
    NonFiniteWeight(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed input at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
