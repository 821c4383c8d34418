//! Client side: `vput` and `vget` over a session.

use mcaslite_client::{ClientError, Pool, Session, ADO_DETACHED};
use mcaslite_core::protocol::Status;

use crate::message::{Reply, Request};
use crate::plugin::DEFAULT_MAX_VERSIONS;
use crate::root::root_size;

#[derive(Debug, thiserror::Error)]
pub enum VersionError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("E_NO_VERSION: {0}")]
    NoVersion(String),
    #[error("E_PROTOCOL: {0}")]
    Protocol(String),
}

impl VersionError {
    pub fn name(&self) -> &'static str {
        match self {
            VersionError::Client(e) => e.name(),
            VersionError::NoVersion(_) => "E_NO_VERSION",
            VersionError::Protocol(_) => "E_PROTOCOL",
        }
    }

    pub fn status(&self) -> Option<Status> {
        match self {
            VersionError::Client(e) => e.status(),
            _ => None,
        }
    }
}

pub type Result<T, E = VersionError> = std::result::Result<T, E>;

/// Adapter for pools whose ADO runs the `versioning` plugin.
#[derive(Clone, Copy, Debug)]
pub struct VersionClient {
    root_len: u64,
}

impl Default for VersionClient {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_VERSIONS)
    }
}

impl VersionClient {
    /// `max_versions` must be at least the server's setting, so that roots
    /// this client creates can hold the server's ring.
    pub fn new(max_versions: u64) -> Self {
        Self { root_len: root_size(max_versions) }
    }

    fn call(&self, session: &mut Session, pool: Pool, key: &[u8], req: Request, value: Option<&[u8]>) -> Result<Reply> {
        let out = match value {
            Some(v) => session.invoke_put_ado(pool, key, &req.encode(), v, self.root_len, ADO_DETACHED)?,
            None => session.invoke_ado(pool, key, &req.encode(), 0, 0)?,
        };
        let [buf] = out.as_slice() else {
            return Err(VersionError::Protocol(format!("expected one response buffer, got {}", out.len())));
        };
        match Reply::decode(&req, buf).map_err(|e| VersionError::Protocol(e.0))? {
            Reply::NoVersion(m) => Err(VersionError::NoVersion(m)),
            Reply::BadRequest(m) => Err(VersionError::Protocol(m)),
            r => Ok(r),
        }
    }

    /// Store `value` as the newest version of `key`. Returns its timestamp.
    pub fn vput(&self, session: &mut Session, pool: Pool, key: &[u8], value: &[u8]) -> Result<u64> {
        match self.call(session, pool, key, Request::Put, Some(value))? {
            Reply::Stored { timestamp } => Ok(timestamp),
            r => Err(VersionError::Protocol(format!("unexpected reply {r:?}"))),
        }
    }

    /// Version `index` of `key`: 0 is the newest, -k is k versions back.
    /// Returns the value and its timestamp.
    pub fn vget(&self, session: &mut Session, pool: Pool, key: &[u8], index: i64) -> Result<(Vec<u8>, u64)> {
        if index > 0 {
            return Err(VersionError::NoVersion(format!("index {index} is in the future")));
        }
        match self.call(session, pool, key, Request::Get { index }, None)? {
            Reply::Version { timestamp, value } => Ok((value, timestamp)),
            r => Err(VersionError::Protocol(format!("unexpected reply {r:?}"))),
        }
    }
}
