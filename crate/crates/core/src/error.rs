use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("empty slice has no statistics")]
    EmptySlice,

    #[error("invalid slice partition: {0}")]
    InvalidPartition(String),

    #[error("cache does not match this call: {0}")]
    CacheMismatch(String),

    #[error("operation not supported for norm kind {0}")]
    UnsupportedKind(&'static str),

    #[error("running statistics are uninitialized; run at least one training forward first")]
    UninitializedStats,

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
