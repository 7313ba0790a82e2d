use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error at {location}: {message}")]
    Manifest { location: String, message: String },

    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sequence too short: need at least {needed} tokens, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("rank {rank} at index {index} outside [1, {vocab_size}]")]
    RankOutOfRange {
        index: usize,
        rank: u32,
        vocab_size: u32,
    },

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing {what} for doc `{doc_id}`")]
    Missing { what: &'static str, doc_id: String },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("length mismatch: {0} golds vs {1} predictions")]
    LengthMismatch(usize, usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
