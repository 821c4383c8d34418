use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the storage layers. Each maps onto one wire status code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("capacity {0} is not a multiple of the region granularity (minimum 64 MiB)")]
    BadCapacity(u64),
    #[error("corrupt arena header: {0}")]
    CorruptHeader(String),
    #[error("corrupt metadata: {0}")]
    Corrupt(String),
    #[error("range {offset:#x}+{len} outside accessible memory")]
    Range { offset: u64, len: u64 },
    #[error("insufficient space")]
    NoSpace,
    #[error("unknown pool {0}")]
    UnknownPool(u64),
    #[error("undo log full")]
    LogFull,
    #[error("bad free at {0:#x}")]
    BadFree(u64),
    #[error("overlapping object records at {0:#x}")]
    Overlap(u64),
    #[error("key not found")]
    KeyNotFound,
    #[error("key already exists")]
    AlreadyExists,
    #[error("value too large")]
    TooLarge,
    #[error("secondary index already attached")]
    AlreadyAttached,
    #[error("no secondary index attached")]
    NoIndex,
    #[error("no further match")]
    NoMatch,
    #[error("bad regular expression: {0}")]
    BadRegex(String),
    #[error("key is locked")]
    Locked,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("table needs expansion")]
    NeedsExpansion,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
