use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // corpus
    #[error("line {0}: token and tag counts differ")]
    LengthMismatch(usize),
    #[error("{what}: expected {expected} lines, found {found}")]
    LineCountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("malformed tag `{0}`")]
    MalformedTag(String),
    #[error("tag {0}: I- tag without a preceding B- or I- tag")]
    DanglingI(usize),
    #[error("tag {0}: I- tag continues a span of a different type")]
    TypeSwitch(usize),
    #[error("overlapping spans")]
    OverlapError,
    #[error("span or index out of range")]
    OutOfRange,
    #[error("line {0}: empty utterance")]
    EmptyUtterance(usize),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    // depgraph
    #[error("line {0}: more than one root")]
    MultipleRoots(usize),
    #[error("line {0}: no root")]
    NoRoot(usize),
    #[error("line {0}: head index out of range")]
    HeadOutOfRange(usize),
    #[error("line {0}: cyclic head structure")]
    CyclicHead(usize),
    #[error("line {0}: not an integer head sequence")]
    ParseInt(usize),
    #[error("line {0}: malformed CoNLL-U")]
    MalformedConllu(usize),

    // model
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sequence of {len} positions exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("empty label description")]
    EmptyDescription,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,

    // checkpoint
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
