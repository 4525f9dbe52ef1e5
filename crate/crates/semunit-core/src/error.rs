use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. `category()` yields the stable one-word code the
/// CLI prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{path}:{line}: empty line")]
    EmptyLine { path: PathBuf, line: usize },
    #[error("{path}:{line}: token {token:?} collides with a reserved sign")]
    ReservedToken {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("trailing continuation mark at sentence end: {subword:?}")]
    TrailingContinuation { subword: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("token id {id} out of range (vocab size {vocab})")]
    UnknownTokenId { id: u32, vocab: usize },
    #[error("span set does not match sentence: {0}")]
    SpanMismatch(String),
    #[error("invalid span partition: {0}")]
    InvalidSpans(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint is incompatible with model: {0}")]
    CheckpointMismatch(String),
    #[error("all target positions are padding")]
    AllPadTarget,
    #[error("missing alignment for sentence {index}")]
    MissingAlignment { index: usize },
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("decoder prefix length {len} exceeds configured maximum {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    /// Stable machine-parsable category, one word, for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::EmptyCorpus => "empty-corpus",
            Error::EmptyLine { .. } => "empty-line",
            Error::ReservedToken { .. } => "reserved-token",
            Error::TrailingContinuation { .. } => "trailing-continuation",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::FullyMaskedRow { .. } => "fully-masked-row",
            Error::UnknownTokenId { .. } => "unknown-token-id",
            Error::SpanMismatch(_) => "span-mismatch",
            Error::InvalidSpans(_) => "invalid-spans",
            Error::Checkpoint { .. } => "checkpoint",
            Error::CheckpointMismatch(_) => "checkpoint-mismatch",
            Error::AllPadTarget => "all-pad-target",
            Error::MissingAlignment { .. } => "missing-alignment",
            Error::InvalidAlignment(_) => "invalid-alignment",
            Error::PrefixTooLong { .. } => "prefix-too-long",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non-finite",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
