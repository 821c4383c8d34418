//! Active data objects: plugins that run next to pool memory in a separate
//! process (or a thread, for deterministic tests) and talk to their shard
//! over a pair of shared-memory rings.

pub mod host;
pub mod message;
pub mod plugin;
pub mod plugins;
pub mod runtime;
pub mod services;
pub mod uipc;

pub use message::{CallbackRequest, CallbackResult, WorkRequest};
pub use plugin::{AdoPlugin, Context, PluginRegistry, Work};

use mcaslite_core::protocol::Status;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdoError {
    #[error("{0}: {1}")]
    Status(Status, String),
    #[error("access outside the pool at {offset:#x}+{len}")]
    MapFail { offset: u64, len: u64 },
    #[error("message of {0} bytes does not fit a queue slot")]
    TooLarge(usize),
    #[error("queue full")]
    QueueFull,
    #[error("plugin host disconnected")]
    Disconnected,
    #[error("malformed queue message: {0}")]
    Malformed(String),
    #[error("{0}")]
    Launch(String),
}

impl AdoError {
    pub fn status(&self) -> Status {
        match self {
            AdoError::Status(s, _) => *s,
            AdoError::MapFail { .. } => Status::Range,
            _ => Status::AdoFault,
        }
    }
}

impl From<mcaslite_core::Error> for AdoError {
    fn from(e: mcaslite_core::Error) -> Self {
        AdoError::Status((&e).into(), e.to_string())
    }
}

impl From<mcaslite_core::codec::ProtocolError> for AdoError {
    fn from(e: mcaslite_core::codec::ProtocolError) -> Self {
        AdoError::Malformed(e.0)
    }
}

pub type Result<T, E = AdoError> = std::result::Result<T, E>;
