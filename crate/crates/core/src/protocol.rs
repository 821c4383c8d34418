//! Framed binary protocol between clients and shards.
//!
//! Every frame starts with a 32-byte little-endian header:
//!
//! ```text
//! 0   magic "MCA2"      4  version (1)   5  opcode   6  flags (u16)
//! 8   request id (u64)  16 auth (u32, 0) 20 reserved (u32, 0)
//! 24  payload length (u64)
//! ```
//!
//! A frame carries at most [`MAX_FRAME`] payload bytes. Longer messages are
//! split into continuation frames with the same opcode and request id; all
//! but the last set [`FLAG_MORE`]. Keys are `u32`-length-prefixed, values
//! `u64`-length-prefixed, strings `u32`-length-prefixed UTF-8. The byte
//! layout of every message is spelled out in `docs/PROTOCOL.md`.

use std::fmt;
use std::io::{self, Read, Write};

use crate::codec::{perr, Dec, Enc};
pub use crate::codec::ProtocolError;
use crate::error::Error;
use crate::index::MatchKind;

pub const MAGIC: [u8; 4] = *b"MCA2";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const MAX_FRAME: u64 = 1 << 20;
/// Largest reassembled message: a 1 GiB value plus room for its fields.
pub const MAX_MESSAGE: u64 = (1 << 30) + 4096;
/// PUT and GET only carry values below this; larger ones go direct.
pub const SMALL_VALUE_LIMIT: u64 = 2 << 20;
pub const FLAG_MORE: u16 = 1;

/// PUT flag: fail with `E_ALREADY_EXISTS` instead of replacing.
pub const PUT_NO_OVERWRITE: u32 = 1;
/// Invoke flag: create the key with a zeroed root of `value_size` bytes.
pub const ADO_CREATE_ON_DEMAND: u32 = 1;
/// Invoke-put flag: hand the value to the plugin without storing it.
pub const ADO_DETACHED: u32 = 2;
/// Invoke-put flag: keep an existing value instead of replacing it.
pub const ADO_NO_OVERWRITE: u32 = 4;

pub const CONFIG_ADD_INDEX: &str = "AddIndex::VolatileTree";
pub const CONFIG_REMOVE_INDEX: &str = "RemoveIndex::";

#[derive(Debug)]
pub enum WireError {
    Protocol(ProtocolError),
    Io(io::Error),
}

impl fmt::Display for WireError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireError::Protocol(p) => p.fmt(f),
            WireError::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

impl std::error::Error for WireError {}

impl From<io::Error> for WireError {
    fn from(e: io::Error) -> Self {
        WireError::Io(e)
    }
}

impl From<ProtocolError> for WireError {
    fn from(e: ProtocolError) -> Self {
        WireError::Protocol(e)
    }
}

macro_rules! codes {
    ($(#[$m:meta])* $name:ident : $ty:ty { $($v:ident = $n:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        #[repr($ty)]
        pub enum $name { $($v = $n),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$v),*];

            pub fn from_code(c: $ty) -> Option<Self> {
                match c {
                    $($n => Some($name::$v),)*
                    _ => None,
                }
            }
        }
    };
}

codes! {
    Opcode: u8 {
        Handshake = 1,
        CreatePool = 2,
        OpenPool = 3,
        ClosePool = 4,
        DeletePool = 5,
        ConfigurePool = 6,
        Put = 7,
        Get = 8,
        Erase = 9,
        PutDirect = 10,
        GetDirect = 11,
        PutDirectOffset = 12,
        GetDirectOffset = 13,
        InvokeAdo = 14,
        InvokePutAdo = 15,
        GetAttributes = 16,
        GetStatistics = 17,
        Find = 18,
        Response = 0x80,
    }
}

codes! {
    /// Result of a request. Codes from 10 up extend the base set.
    Status: u16 {
        Ok = 0,
        KeyNotFound = 1,
        AlreadyExists = 2,
        NoSpace = 3,
        TooLarge = 4,
        BadPool = 5,
        NoIndex = 6,
        NoMatch = 7,
        AdoFault = 8,
        Protocol = 9,
        Range = 10,
        BadRegex = 11,
        AlreadyAttached = 12,
        Busy = 13,
        Locked = 14,
        Invalid = 15,
        Internal = 16,
    }
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "S_OK",
            Status::KeyNotFound => "E_KEY_NOT_FOUND",
            Status::AlreadyExists => "E_ALREADY_EXISTS",
            Status::NoSpace => "E_NO_SPACE",
            Status::TooLarge => "E_TOO_LARGE",
            Status::BadPool => "E_BAD_POOL",
            Status::NoIndex => "E_NO_INDEX",
            Status::NoMatch => "E_NO_MATCH",
            Status::AdoFault => "E_ADO_FAULT",
            Status::Protocol => "E_PROTOCOL",
            Status::Range => "E_RANGE",
            Status::BadRegex => "E_BAD_REGEX",
            Status::AlreadyAttached => "E_ALREADY_ATTACHED",
            Status::Busy => "E_BUSY",
            Status::Locked => "E_LOCKED",
            Status::Invalid => "E_INVALID",
            Status::Internal => "E_INTERNAL",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<&Error> for Status {
    fn from(e: &Error) -> Self {
        match e {
            Error::KeyNotFound => Status::KeyNotFound,
            Error::AlreadyExists => Status::AlreadyExists,
            Error::NoSpace | Error::LogFull => Status::NoSpace,
            Error::TooLarge => Status::TooLarge,
            Error::UnknownPool(_) => Status::BadPool,
            Error::NoIndex => Status::NoIndex,
            Error::NoMatch => Status::NoMatch,
            Error::Range { .. } => Status::Range,
            Error::BadRegex(_) => Status::BadRegex,
            Error::AlreadyAttached => Status::AlreadyAttached,
            Error::Locked => Status::Locked,
            Error::Invalid(_) | Error::BadFree(_) => Status::Invalid,
            _ => Status::Internal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub opcode: u8,
    pub flags: u16,
    pub request_id: u64,
    pub payload_len: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5] = self.opcode;
        b[6..8].copy_from_slice(&self.flags.to_le_bytes());
        b[8..16].copy_from_slice(&self.request_id.to_le_bytes());
        b[24..32].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> Result<Self, ProtocolError> {
        if b[0..4] != MAGIC {
            return perr(format!("bad magic {:02x?}", &b[0..4]));
        }
        if b[4] != VERSION {
            return perr(format!("unsupported version {}", b[4]));
        }
        let le = |r: std::ops::Range<usize>| {
            let mut a = [0u8; 8];
            a[..r.len()].copy_from_slice(&b[r]);
            u64::from_le_bytes(a)
        };
        let h = Header {
            opcode: b[5],
            flags: le(6..8) as u16,
            request_id: le(8..16),
            payload_len: le(24..32),
        };
        if le(16..24) != 0 {
            return perr("auth and reserved fields must be zero");
        }
        if h.payload_len > MAX_FRAME {
            return perr(format!("frame payload {} exceeds {MAX_FRAME}", h.payload_len));
        }
        if h.flags & !FLAG_MORE != 0 {
            return perr(format!("unknown flags {:#x}", h.flags));
        }
        if Opcode::from_code(h.opcode).is_none() {
            return perr(format!("unknown opcode {:#x}", h.opcode));
        }
        Ok(h)
    }
}

/// A reassembled message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub opcode: Opcode,
    pub request_id: u64,
    pub body: Vec<u8>,
}

/// Write one message as frames, reading the body from `parts` in order
/// without concatenating them.
pub fn write_message<W: Write>(w: &mut W, opcode: Opcode, request_id: u64, parts: &[&[u8]]) -> io::Result<()> {
    let total: u64 = parts.iter().map(|p| p.len() as u64).sum();
    let mut left = total;
    let mut part = 0;
    let mut at = 0usize;
    loop {
        let n = left.min(MAX_FRAME);
        left -= n;
        let h = Header { opcode: opcode as u8, flags: if left > 0 { FLAG_MORE } else { 0 }, request_id, payload_len: n };
        w.write_all(&h.encode())?;
        let mut need = n as usize;
        while need > 0 {
            let p = parts[part];
            let take = need.min(p.len() - at);
            w.write_all(&p[at..at + take])?;
            at += take;
            need -= take;
            if at == p.len() {
                part += 1;
                at = 0;
            }
        }
        if left == 0 {
            return Ok(());
        }
    }
}

/// Frame bytes of one message.
pub fn frame(opcode: Opcode, request_id: u64, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + HEADER_LEN);
    write_message(&mut out, opcode, request_id, &[body]).expect("vec write");
    out
}

/// Read frames until a message is complete. `Ok(None)` on clean end of
/// stream before any header byte.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut hb = [0u8; HEADER_LEN];
    if !read_full_or_eof(r, &mut hb)? {
        return Ok(None);
    }
    let first = Header::decode(&hb)?;
    let opcode = Opcode::from_code(first.opcode).expect("checked in decode");
    let mut body = vec![0u8; first.payload_len as usize];
    r.read_exact(&mut body)?;
    let mut h = first;
    while h.flags & FLAG_MORE != 0 {
        r.read_exact(&mut hb)?;
        h = Header::decode(&hb)?;
        if h.opcode != first.opcode || h.request_id != first.request_id {
            return Err(ProtocolError("continuation frame does not match its message".into()).into());
        }
        if body.len() as u64 + h.payload_len > MAX_MESSAGE {
            return Err(ProtocolError(format!("message exceeds {MAX_MESSAGE} bytes")).into());
        }
        let at = body.len();
        body.resize(at + h.payload_len as usize, 0);
        r.read_exact(&mut body[at..])?;
    }
    Ok(Some(Message { opcode, request_id: first.request_id, body }))
}

fn read_full_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Length of the complete message at the front of `buf`, or `None` while
/// more bytes are needed. Validates headers without copying bodies.
pub fn message_extent(buf: &[u8]) -> Result<Option<usize>, ProtocolError> {
    let mut at = 0usize;
    let mut first: Option<Header> = None;
    let mut total = 0u64;
    loop {
        let Some(hb) = buf.get(at..at + HEADER_LEN) else { return Ok(None) };
        let h = Header::decode(hb.try_into().expect("header length"))?;
        if let Some(f) = first {
            if h.opcode != f.opcode || h.request_id != f.request_id {
                return perr("continuation frame does not match its message");
            }
        } else {
            first = Some(h);
        }
        total += h.payload_len;
        if total > MAX_MESSAGE {
            return perr(format!("message exceeds {MAX_MESSAGE} bytes"));
        }
        at += HEADER_LEN + h.payload_len as usize;
        if h.flags & FLAG_MORE == 0 {
            return Ok(if buf.len() >= at { Some(at) } else { None });
        }
    }
}

/// Parse one message from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn parse_message(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    let mut cur = io::Cursor::new(bytes);
    match read_message(&mut cur) {
        Ok(Some(m)) => Ok((m, cur.position() as usize)),
        Ok(None) => Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    Handshake { version: u32 },
    CreatePool { name: String, size: u64 },
    OpenPool { name: String },
    ClosePool { pool: u64 },
    DeletePool { name: String },
    ConfigurePool { pool: u64, setting: String },
    Put { pool: u64, key: Vec<u8>, value: Vec<u8>, flags: u32 },
    Get { pool: u64, key: Vec<u8> },
    Erase { pool: u64, key: Vec<u8> },
    PutDirect { pool: u64, key: Vec<u8>, value: Vec<u8>, flags: u32 },
    GetDirect { pool: u64, key: Vec<u8> },
    PutDirectOffset { pool: u64, key: Vec<u8>, offset: u64, data: Vec<u8> },
    GetDirectOffset { pool: u64, key: Vec<u8>, offset: u64, len: u64 },
    InvokeAdo { pool: u64, key: Vec<u8>, request: Vec<u8>, value_size: u64, flags: u32 },
    InvokePutAdo { pool: u64, key: Vec<u8>, request: Vec<u8>, value: Vec<u8>, root_len: u64, flags: u32 },
    GetAttributes { pool: u64, key: Vec<u8> },
    GetStatistics,
    Find { pool: u64, expr: Vec<u8>, kind: MatchKind, begin: u64 },
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::Handshake { .. } => Opcode::Handshake,
            Request::CreatePool { .. } => Opcode::CreatePool,
            Request::OpenPool { .. } => Opcode::OpenPool,
            Request::ClosePool { .. } => Opcode::ClosePool,
            Request::DeletePool { .. } => Opcode::DeletePool,
            Request::ConfigurePool { .. } => Opcode::ConfigurePool,
            Request::Put { .. } => Opcode::Put,
            Request::Get { .. } => Opcode::Get,
            Request::Erase { .. } => Opcode::Erase,
            Request::PutDirect { .. } => Opcode::PutDirect,
            Request::GetDirect { .. } => Opcode::GetDirect,
            Request::PutDirectOffset { .. } => Opcode::PutDirectOffset,
            Request::GetDirectOffset { .. } => Opcode::GetDirectOffset,
            Request::InvokeAdo { .. } => Opcode::InvokeAdo,
            Request::InvokePutAdo { .. } => Opcode::InvokePutAdo,
            Request::GetAttributes { .. } => Opcode::GetAttributes,
            Request::GetStatistics => Opcode::GetStatistics,
            Request::Find { .. } => Opcode::Find,
        }
    }

    /// True for requests whose success acknowledges a durable change.
    pub fn is_mutation(&self) -> bool {
        matches!(
            self,
            Request::CreatePool { .. }
                | Request::DeletePool { .. }
                | Request::Put { .. }
                | Request::Erase { .. }
                | Request::PutDirect { .. }
                | Request::PutDirectOffset { .. }
                | Request::InvokeAdo { .. }
                | Request::InvokePutAdo { .. }
        )
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut e = Enc::default();
        match self {
            Request::Handshake { version } => {
                e.u32(*version);
            }
            Request::CreatePool { name, size } => {
                e.string(name).u64(*size);
            }
            Request::OpenPool { name } | Request::DeletePool { name } => {
                e.string(name);
            }
            Request::ClosePool { pool } => {
                e.u64(*pool);
            }
            Request::ConfigurePool { pool, setting } => {
                e.u64(*pool).string(setting);
            }
            Request::Put { pool, key, value, flags } | Request::PutDirect { pool, key, value, flags } => {
                e.u64(*pool).u32(*flags).key(key).value(value);
            }
            Request::Get { pool, key }
            | Request::Erase { pool, key }
            | Request::GetDirect { pool, key }
            | Request::GetAttributes { pool, key } => {
                e.u64(*pool).key(key);
            }
            Request::PutDirectOffset { pool, key, offset, data } => {
                e.u64(*pool).key(key).u64(*offset).value(data);
            }
            Request::GetDirectOffset { pool, key, offset, len } => {
                e.u64(*pool).key(key).u64(*offset).u64(*len);
            }
            Request::InvokeAdo { pool, key, request, value_size, flags } => {
                e.u64(*pool).u32(*flags).key(key).u64(*value_size).value(request);
            }
            Request::InvokePutAdo { pool, key, request, value, root_len, flags } => {
                e.u64(*pool).u32(*flags).key(key).u64(*root_len).value(request).value(value);
            }
            Request::GetStatistics => {}
            Request::Find { pool, expr, kind, begin } => {
                e.u64(*pool).u8(*kind as u8).u64(*begin);
                e.u32(expr.len() as u32);
                e.0.extend_from_slice(expr);
            }
        }
        e.0
    }

    pub fn decode(opcode: Opcode, body: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = Dec::new(body);
        let r = match opcode {
            Opcode::Handshake => Request::Handshake { version: d.u32()? },
            Opcode::CreatePool => Request::CreatePool { name: d.string()?, size: d.u64()? },
            Opcode::OpenPool => Request::OpenPool { name: d.string()? },
            Opcode::ClosePool => Request::ClosePool { pool: d.u64()? },
            Opcode::DeletePool => Request::DeletePool { name: d.string()? },
            Opcode::ConfigurePool => Request::ConfigurePool { pool: d.u64()?, setting: d.string()? },
            Opcode::Put | Opcode::PutDirect => {
                let (pool, flags, key, value) = (d.u64()?, d.u32()?, d.key()?, d.value()?);
                if opcode == Opcode::Put {
                    Request::Put { pool, key, value, flags }
                } else {
                    Request::PutDirect { pool, key, value, flags }
                }
            }
            Opcode::Get => Request::Get { pool: d.u64()?, key: d.key()? },
            Opcode::Erase => Request::Erase { pool: d.u64()?, key: d.key()? },
            Opcode::GetDirect => Request::GetDirect { pool: d.u64()?, key: d.key()? },
            Opcode::GetAttributes => Request::GetAttributes { pool: d.u64()?, key: d.key()? },
            Opcode::PutDirectOffset => {
                Request::PutDirectOffset { pool: d.u64()?, key: d.key()?, offset: d.u64()?, data: d.value()? }
            }
            Opcode::GetDirectOffset => {
                Request::GetDirectOffset { pool: d.u64()?, key: d.key()?, offset: d.u64()?, len: d.u64()? }
            }
            Opcode::InvokeAdo => {
                let (pool, flags, key, value_size, request) = (d.u64()?, d.u32()?, d.key()?, d.u64()?, d.value()?);
                Request::InvokeAdo { pool, key, request, value_size, flags }
            }
            Opcode::InvokePutAdo => {
                let (pool, flags, key, root_len) = (d.u64()?, d.u32()?, d.key()?, d.u64()?);
                let (request, value) = (d.value()?, d.value()?);
                Request::InvokePutAdo { pool, key, request, value, root_len, flags }
            }
            Opcode::GetStatistics => Request::GetStatistics,
            Opcode::Find => {
                let pool = d.u64()?;
                let kind = MatchKind::from_u8(d.u8()?).ok_or_else(|| ProtocolError("unknown match kind".into()))?;
                let begin = d.u64()?;
                Request::Find { pool, expr: d.bytes32()?, kind, begin }
            }
            Opcode::Response => return perr("response opcode in a request"),
        };
        d.finish()?;
        Ok(r)
    }

    pub fn to_frame(&self, request_id: u64) -> Vec<u8> {
        frame(self.opcode(), request_id, &self.encode_body())
    }
}

/// Body prefix of a PUT_DIRECT whose value bytes follow directly, so a
/// client can stream the value from its own buffer.
pub fn put_direct_head(pool: u64, key: &[u8], flags: u32, value_len: u64) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(pool).u32(flags).key(key).u64(value_len);
    e.0
}

/// Body prefix of a PUT_DIRECT_OFFSET; the data bytes follow.
pub fn put_direct_offset_head(pool: u64, key: &[u8], offset: u64, data_len: u64) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(pool).key(key).u64(offset).u64(data_len);
    e.0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    Empty,
    Handshake { version: u32, shard: u32 },
    Pool { id: u64 },
    Value(Vec<u8>),
    Attributes { value_len: u64, write_time: u32 },
    Statistics(Vec<(String, u64)>),
    Found { key: Vec<u8>, next: u64 },
    Ado(Vec<Vec<u8>>),
    /// Error detail for a failed request.
    Message(String),
}

impl Body {
    fn tag(&self) -> u8 {
        match self {
            Body::Empty => 0,
            Body::Handshake { .. } => 1,
            Body::Pool { .. } => 2,
            Body::Value(_) => 3,
            Body::Attributes { .. } => 4,
            Body::Statistics(_) => 5,
            Body::Found { .. } => 6,
            Body::Ado(_) => 7,
            Body::Message(_) => 8,
        }
    }
}

/// Response body: status (u16), body tag (u8), reserved (u8), then the
/// tagged content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub body: Body,
}

impl Response {
    pub fn ok(body: Body) -> Self {
        Self { status: Status::Ok, body }
    }

    pub fn err(status: Status) -> Self {
        Self { status, body: Body::Empty }
    }

    pub fn from_error(e: &Error) -> Self {
        Self { status: e.into(), body: Body::Message(e.to_string()) }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut e = Enc::default();
        e.u16(self.status as u16).u8(self.body.tag()).u8(0);
        match &self.body {
            Body::Empty => {}
            Body::Handshake { version, shard } => {
                e.u32(*version).u32(*shard);
            }
            Body::Pool { id } => {
                e.u64(*id);
            }
            Body::Value(v) => {
                e.value(v);
            }
            Body::Attributes { value_len, write_time } => {
                e.u64(*value_len).u32(*write_time);
            }
            Body::Statistics(s) => {
                e.u32(s.len() as u32);
                for (k, v) in s {
                    e.string(k).u64(*v);
                }
            }
            Body::Found { key, next } => {
                e.key(key).u64(*next);
            }
            Body::Ado(v) => {
                e.u32(v.len() as u32);
                for r in v {
                    e.value(r);
                }
            }
            Body::Message(m) => {
                e.string(m);
            }
        }
        e.0
    }

    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = Dec::new(body);
        let code = d.u16()?;
        let status = Status::from_code(code).ok_or_else(|| ProtocolError(format!("unknown status {code}")))?;
        let tag = d.u8()?;
        if d.u8()? != 0 {
            return perr("reserved response byte set");
        }
        let body = match tag {
            0 => Body::Empty,
            1 => Body::Handshake { version: d.u32()?, shard: d.u32()? },
            2 => Body::Pool { id: d.u64()? },
            3 => Body::Value(d.value()?),
            4 => Body::Attributes { value_len: d.u64()?, write_time: d.u32()? },
            5 => {
                let n = d.u32()?;
                let mut s = Vec::new();
                for _ in 0..n {
                    s.push((d.string()?, d.u64()?));
                }
                Body::Statistics(s)
            }
            6 => Body::Found { key: d.key()?, next: d.u64()? },
            7 => {
                let n = d.u32()?;
                let mut v = Vec::new();
                for _ in 0..n {
                    v.push(d.value()?);
                }
                Body::Ado(v)
            }
            8 => Body::Message(d.string()?),
            t => return perr(format!("unknown body tag {t}")),
        };
        d.finish()?;
        Ok(Self { status, body })
    }

    pub fn to_frame(&self, request_id: u64) -> Vec<u8> {
        frame(Opcode::Response, request_id, &self.encode_body())
    }
}

/// Response head for a value of `len` bytes whose bytes follow directly.
pub fn value_response_head(len: u64) -> Vec<u8> {
    let mut e = Enc::default();
    e.u16(Status::Ok as u16).u8(3).u8(0).u64(len);
    e.0
}

pub fn decode_request(m: &Message) -> Result<Request, ProtocolError> {
    Request::decode(m.opcode, &m.body)
}

pub fn decode_response(m: &Message) -> Result<Response, ProtocolError> {
    if m.opcode != Opcode::Response {
        return perr(format!("expected a response, got {:?}", m.opcode));
    }
    Response::decode(&m.body)
}

pub fn to_hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

pub fn from_hex(s: &str) -> Option<Vec<u8>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_frame_size() {
        let r = Request::Put { pool: 7, key: b"a".to_vec(), value: vec![0xab; 16], flags: 0 };
        let f = r.to_frame(1);
        // pool + flags + (len + key) + (len + value)
        assert_eq!(f.len(), HEADER_LEN + 8 + 4 + 4 + 1 + 8 + 16);
        let (m, used) = parse_message(&f).unwrap();
        assert_eq!(used, f.len());
        assert_eq!(decode_request(&m).unwrap(), r);
    }

    #[test]
    fn bad_magic() {
        let mut f = Request::GetStatistics.to_frame(1);
        f[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(parse_message(&f), Err(WireError::Protocol(_))));
    }

    #[test]
    fn empty_key_rejected() {
        let body = {
            let mut e = Enc::default();
            e.u64(7).u32(0).key(b"").value(b"v");
            e.0
        };
        assert!(Request::decode(Opcode::Put, &body).is_err());
    }

    #[test]
    fn unknown_opcode_and_overlength() {
        let mut f = Request::GetStatistics.to_frame(1);
        f[5] = 0x42;
        assert!(matches!(parse_message(&f), Err(WireError::Protocol(_))));
        let mut f = Request::GetStatistics.to_frame(1);
        f[24..32].copy_from_slice(&(MAX_FRAME + 1).to_le_bytes());
        assert!(matches!(parse_message(&f), Err(WireError::Protocol(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let r = Request::Get { pool: 1, key: b"abc".to_vec() };
        let body = r.encode_body();
        assert!(Request::decode(Opcode::Get, &body[..body.len() - 1]).is_err());
        let mut long = body.clone();
        long.push(0);
        assert!(Request::decode(Opcode::Get, &long).is_err());
        let f = r.to_frame(3);
        assert!(matches!(parse_message(&f[..f.len() - 1]), Err(WireError::Io(_))));
    }

    #[test]
    fn large_messages_are_chunked() {
        let v: Vec<u8> = (0..(3 * MAX_FRAME + 5)).map(|i| i as u8).collect();
        let r = Request::PutDirect { pool: 2, key: b"k".to_vec(), value: v, flags: 0 };
        let f = r.to_frame(9);
        let body_len = r.encode_body().len() as u64;
        let frames = body_len.div_ceil(MAX_FRAME);
        assert_eq!(f.len() as u64, body_len + frames * HEADER_LEN as u64);
        let (m, used) = parse_message(&f).unwrap();
        assert_eq!(used, f.len());
        assert_eq!(decode_request(&m).unwrap(), r);
    }

    #[test]
    fn streamed_head_matches_encoding() {
        let v = vec![5u8; 2_500_000];
        let r = Request::PutDirect { pool: 2, key: b"key".to_vec(), value: v.clone(), flags: 1 };
        let mut streamed = Vec::new();
        write_message(&mut streamed, Opcode::PutDirect, 4, &[&put_direct_head(2, b"key", 1, v.len() as u64), &v]).unwrap();
        assert_eq!(streamed, r.to_frame(4));
        let resp = Response::ok(Body::Value(v.clone()));
        let mut streamed = Vec::new();
        write_message(&mut streamed, Opcode::Response, 4, &[&value_response_head(v.len() as u64), &v]).unwrap();
        assert_eq!(streamed, resp.to_frame(4));
    }

    #[test]
    fn mismatched_continuation_rejected() {
        let v = vec![1u8; (MAX_FRAME + 10) as usize];
        let mut f = Request::PutDirect { pool: 1, key: b"k".to_vec(), value: v, flags: 0 }.to_frame(1);
        let second = HEADER_LEN + MAX_FRAME as usize;
        f[second + 8] = 2;
        assert!(matches!(parse_message(&f), Err(WireError::Protocol(_))));
    }

    #[test]
    fn status_codes_roundtrip() {
        for &s in Status::ALL {
            assert_eq!(Status::from_code(s as u16), Some(s));
        }
        for &o in Opcode::ALL {
            assert_eq!(Opcode::from_code(o as u8), Some(o));
        }
        assert_eq!(Status::from(&Error::KeyNotFound), Status::KeyNotFound);
        assert_eq!(Status::from(&Error::UnknownPool(3)), Status::BadPool);
    }

    #[test]
    fn extent_waits_for_every_frame() {
        let v = vec![3u8; (2 * MAX_FRAME + 7) as usize];
        let f = Request::PutDirect { pool: 1, key: b"k".to_vec(), value: v, flags: 0 }.to_frame(5);
        for cut in [0, 10, HEADER_LEN, HEADER_LEN + MAX_FRAME as usize + 40, f.len() - 1] {
            assert_eq!(message_extent(&f[..cut]).unwrap(), None, "{cut}");
        }
        let mut two = f.clone();
        two.extend_from_slice(&Request::GetStatistics.to_frame(6));
        assert_eq!(message_extent(&two).unwrap(), Some(f.len()));
        assert!(message_extent(b"XXXXXXXXXXXXXXXXXXXXXXXXXXXXXXXXXXXX").is_err());
    }

    #[test]
    fn hex_helpers() {
        assert_eq!(from_hex("0a ff\n10").unwrap(), vec![0x0a, 0xff, 0x10]);
        assert_eq!(to_hex(&[1, 0xab]), "01ab");
        assert!(from_hex("abc").is_none());
    }
}
