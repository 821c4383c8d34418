//! Messages between the client adapter and the plugin.
//!
//! Requests ride in the ADO invoke payload:
//!
//! ```text
//! put: u8 1                  (the value itself travels as the detached value)
//! get: u8 2, i64 index       (0 = latest, -k = k versions back)
//! ```
//!
//! The plugin answers with a single response buffer:
//!
//! ```text
//! u8 outcome (0 ok, 1 no such version, 2 bad request)
//! ok put: u64 timestamp
//! ok get: u64 timestamp, u64 length, value bytes
//! otherwise: u32 length, UTF-8 detail
//! ```
//!
//! All integers are little-endian.

use mcaslite_core::codec::{perr, Dec, Enc, ProtocolError};

const PUT: u8 = 1;
const GET: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Request {
    Put,
    Get { index: i64 },
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        match *self {
            Request::Put => e.u8(PUT),
            Request::Get { index } => e.u8(GET).u64(index as u64),
        };
        e.into_vec()
    }

    pub fn decode(b: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = Dec::new(b);
        let r = match d.u8()? {
            PUT => Request::Put,
            GET => Request::Get { index: d.u64()? as i64 },
            t => return perr(format!("unknown versioning request {t}")),
        };
        d.finish()?;
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Stored { timestamp: u64 },
    Version { timestamp: u64, value: Vec<u8> },
    NoVersion(String),
    BadRequest(String),
}

impl Reply {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        match self {
            Reply::Stored { timestamp } => e.u8(0).u64(*timestamp),
            Reply::Version { timestamp, value } => e.u8(0).u64(*timestamp).value(value),
            Reply::NoVersion(m) => e.u8(1).string(m),
            Reply::BadRequest(m) => e.u8(2).string(m),
        };
        e.into_vec()
    }

    /// Decode the answer to `req`; the two ok shapes differ only by request.
    pub fn decode(req: &Request, b: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = Dec::new(b);
        let r = match (d.u8()?, req) {
            (0, Request::Put) => Reply::Stored { timestamp: d.u64()? },
            (0, Request::Get { .. }) => Reply::Version { timestamp: d.u64()?, value: d.value()? },
            (1, _) => Reply::NoVersion(d.string()?),
            (2, _) => Reply::BadRequest(d.string()?),
            (t, _) => return perr(format!("unknown versioning outcome {t}")),
        };
        d.finish()?;
        Ok(r)
    }
}
