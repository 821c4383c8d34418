//! Client library for mcaslite shards.
//!
//! A [`Session`] is one TCP connection to one shard. Requests are
//! pipelined: the asynchronous calls return an [`AsyncHandle`] right after
//! the request is written, and [`Session::check_async_completion`] matches
//! responses to handles by request id. Synchronous calls are the same
//! requests followed by a wait.
//!
//! Direct transfers move value bytes between a [`DirectBuffer`] and the
//! socket without staging them in another client buffer; the buffer must be
//! registered with the session first. Responses arrive in request order,
//! so a caller that pipelines many large reads must keep draining
//! completions or the shard stops reading from the connection.

pub mod ring;

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use mcaslite_core::index::MatchKind;
use mcaslite_core::protocol::{
    decode_response, message_extent, parse_message, put_direct_head, put_direct_offset_head, write_message, Body, Header,
    Opcode, Request, Response, Status, FLAG_MORE, HEADER_LEN, VERSION,
};

pub use mcaslite_core::protocol::{
    ADO_CREATE_ON_DEMAND, ADO_DETACHED, ADO_NO_OVERWRITE, CONFIG_ADD_INDEX, CONFIG_REMOVE_INDEX, PUT_NO_OVERWRITE,
    SMALL_VALUE_LIMIT,
};
pub use ring::{shard_of, Ring};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The shard refused the request.
    #[error("{status}: {detail}")]
    Status { status: Status, detail: String },
    #[error("E_NOT_REGISTERED: buffer is not registered with this session")]
    NotRegistered,
    #[error("E_RANGE: {0}")]
    Range(String),
    #[error("E_CONNECT: {0}")]
    Connect(io::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("E_PROTOCOL: {0}")]
    Protocol(String),
    #[error("async handle {0} is not pending")]
    UnknownHandle(u64),
}

impl ClientError {
    /// Server status, when the shard answered.
    pub fn status(&self) -> Option<Status> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClientError::Status { status, .. } => status.name(),
            ClientError::NotRegistered => "E_NOT_REGISTERED",
            ClientError::Range(_) => "E_RANGE",
            ClientError::Connect(_) => "E_CONNECT",
            ClientError::Io(_) => "E_IO",
            ClientError::Protocol(_) => "E_PROTOCOL",
            ClientError::UnknownHandle(_) => "E_INVALID",
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

fn protocol(e: impl ToString) -> ClientError {
    ClientError::Protocol(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pool(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub value_len: u64,
    /// Unix seconds of the last write.
    pub write_time: u32,
}

/// Client memory that direct operations read from or write into.
/// Clones share the same bytes.
#[derive(Clone, Debug)]
pub struct DirectBuffer {
    id: u64,
    data: Arc<Mutex<Vec<u8>>>,
}

static NEXT_BUFFER: AtomicU64 = AtomicU64::new(1);

impl DirectBuffer {
    pub fn new(len: usize) -> Self {
        Self::from_vec(vec![0; len])
    }

    pub fn from_vec(v: Vec<u8>) -> Self {
        Self { id: NEXT_BUFFER.fetch_add(1, Ordering::Relaxed), data: Arc::new(Mutex::new(v)) }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.lock().clone()
    }

    pub fn slice(&self, start: usize, len: usize) -> Vec<u8> {
        self.lock()[start..start + len].to_vec()
    }

    pub fn write_at(&self, at: usize, data: &[u8]) {
        self.lock()[at..at + data.len()].copy_from_slice(data);
    }

    pub fn lock(&self) -> MutexGuard<'_, Vec<u8>> {
        self.data.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Counts of values handed out by [`Session::get`] and returned through
/// [`Session::free_memory`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryCounters {
    pub allocated: u64,
    pub freed: u64,
    pub allocated_bytes: u64,
    pub freed_bytes: u64,
}

impl MemoryCounters {
    pub fn balanced(&self) -> bool {
        self.allocated == self.freed && self.allocated_bytes == self.freed_bytes
    }
}

/// What an asynchronous operation produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Completion {
    Done,
    Value(Vec<u8>),
    /// Bytes placed into the operation's direct buffer.
    Copied(u64),
    Ado(Vec<Vec<u8>>),
}

/// One pending asynchronous operation. Resolves exactly once.
#[derive(Debug, PartialEq, Eq, Hash)]
#[must_use = "an async operation is only known complete once its handle is checked"]
pub struct AsyncHandle {
    id: u64,
}

impl AsyncHandle {
    pub fn request_id(&self) -> u64 {
        self.id
    }
}

#[derive(Debug)]
enum Slot {
    Plain,
    IntoBuffer { buf: DirectBuffer, at: usize, room: usize },
}

/// Frame position while streaming a response body straight off the socket.
struct BodyCursor {
    request_id: u64,
    left: u64,
    more: bool,
}

pub struct Session {
    stream: TcpStream,
    peer: SocketAddr,
    inbuf: Vec<u8>,
    in_pos: usize,
    next_id: u64,
    pending: BTreeMap<u64, Slot>,
    done: HashMap<u64, Result<Response>>,
    registered: HashMap<u64, usize>,
    shard: u32,
    memory: MemoryCounters,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("peer", &self.peer).field("shard", &self.shard).finish()
    }
}

fn check(r: Response) -> Result<Response> {
    if r.status == Status::Ok {
        return Ok(r);
    }
    let detail = match r.body {
        Body::Message(m) => m,
        _ => String::new(),
    };
    Err(ClientError::Status { status: r.status, detail })
}

fn unexpected(r: &Response) -> ClientError {
    protocol(format!("unexpected response body {:?}", r.body))
}

impl Session {
    /// Connect and exchange versions.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(ClientError::Connect)?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let mut s = Self {
            stream,
            peer,
            inbuf: Vec::new(),
            in_pos: 0,
            next_id: 1,
            pending: BTreeMap::new(),
            done: HashMap::new(),
            registered: HashMap::new(),
            shard: 0,
            memory: MemoryCounters::default(),
        };
        match s.call(&Request::Handshake { version: VERSION as u32 })?.body {
            Body::Handshake { shard, .. } => s.shard = shard,
            _ => return Err(protocol("bad handshake reply")),
        }
        Ok(s)
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Id the shard reported at handshake.
    pub fn shard_id(&self) -> u32 {
        self.shard
    }

    /// Requests sent whose responses have not been collected.
    pub fn outstanding(&self) -> usize {
        self.pending.len() + self.done.len()
    }

    fn take_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn send_parts(&mut self, op: Opcode, parts: &[&[u8]], slot: Slot) -> Result<u64> {
        let id = self.take_id();
        let mut w = BufWriter::with_capacity(64 << 10, &self.stream);
        write_message(&mut w, op, id, parts)?;
        w.flush()?;
        self.pending.insert(id, slot);
        Ok(id)
    }

    fn send(&mut self, req: &Request) -> Result<u64> {
        self.send_parts(req.opcode(), &[&req.encode_body()], Slot::Plain)
    }

    fn call(&mut self, req: &Request) -> Result<Response> {
        let id = self.send(req)?;
        self.wait(id).and_then(check)
    }

    fn fill(&mut self, block: bool) -> Result<bool> {
        if self.in_pos > 0 && self.in_pos == self.inbuf.len() {
            self.inbuf.clear();
            self.in_pos = 0;
        }
        let mut chunk = vec![0u8; 256 << 10];
        if !block {
            self.stream.set_nonblocking(true)?;
        }
        let r = loop {
            match self.stream.read(&mut chunk) {
                Ok(0) => break Err(ClientError::Io(io::ErrorKind::UnexpectedEof.into())),
                Ok(n) => {
                    self.inbuf.extend_from_slice(&chunk[..n]);
                    break Ok(true);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break Ok(false),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => break Err(e.into()),
            }
        };
        if !block {
            self.stream.set_nonblocking(false)?;
        }
        r
    }

    /// Resolve complete buffered responses while earlier requests are pending.
    fn absorb(&mut self) -> Result<()> {
        while !self.pending.is_empty() {
            let buf = &self.inbuf[self.in_pos..];
            let Some(n) = message_extent(buf).map_err(protocol)? else { return Ok(()) };
            let (m, _) = parse_message(&buf[..n]).map_err(protocol)?;
            self.in_pos += n;
            if self.in_pos == self.inbuf.len() {
                self.inbuf.clear();
                self.in_pos = 0;
            }
            let slot = self.pending.remove(&m.request_id).ok_or_else(|| {
                protocol(format!("response to request {} which is not pending", m.request_id))
            })?;
            let r = decode_response(&m).map_err(protocol);
            let r = match (slot, r) {
                (Slot::IntoBuffer { buf, at, room }, Ok(Response { status: Status::Ok, body: Body::Value(v) })) => {
                    if v.len() > room {
                        Err(ClientError::Range(format!("value of {} bytes does not fit {room}", v.len())))
                    } else {
                        buf.write_at(at, &v);
                        Ok(Response::ok(Body::Pool { id: v.len() as u64 }))
                    }
                }
                (_, r) => r,
            };
            self.done.insert(m.request_id, r);
        }
        Ok(())
    }

    fn wait(&mut self, id: u64) -> Result<Response> {
        loop {
            if let Some(r) = self.done.remove(&id) {
                return r;
            }
            if !self.pending.contains_key(&id) {
                return Err(ClientError::UnknownHandle(id));
            }
            self.absorb()?;
            if !self.done.contains_key(&id) {
                self.fill(true)?;
            }
        }
    }

    /// Wait for every request sent before `id` to be answered.
    fn drain_before(&mut self, id: u64) -> Result<()> {
        while self.pending.range(..id).next().is_some() {
            self.absorb()?;
            if self.pending.range(..id).next().is_some() {
                self.fill(true)?;
            }
        }
        Ok(())
    }

    fn read_raw(&mut self, dst: &mut [u8]) -> Result<()> {
        let have = (self.inbuf.len() - self.in_pos).min(dst.len());
        dst[..have].copy_from_slice(&self.inbuf[self.in_pos..self.in_pos + have]);
        self.in_pos += have;
        if have < dst.len() {
            self.stream.read_exact(&mut dst[have..])?;
        }
        Ok(())
    }

    fn next_frame(&mut self, c: &mut BodyCursor) -> Result<()> {
        let mut hb = [0u8; HEADER_LEN];
        self.read_raw(&mut hb)?;
        let h = Header::decode(&hb).map_err(protocol)?;
        if h.opcode != Opcode::Response as u8 || h.request_id != c.request_id {
            return Err(protocol(format!("expected the response to {}", c.request_id)));
        }
        c.left = h.payload_len;
        c.more = h.flags & FLAG_MORE != 0;
        Ok(())
    }

    fn read_body(&mut self, c: &mut BodyCursor, dst: &mut [u8]) -> Result<()> {
        let mut got = 0;
        while got < dst.len() {
            if c.left == 0 {
                if !c.more {
                    return Err(protocol("response body ends early"));
                }
                self.next_frame(c)?;
                continue;
            }
            let n = (c.left as usize).min(dst.len() - got);
            self.read_raw(&mut dst[got..got + n])?;
            got += n;
            c.left -= n as u64;
        }
        Ok(())
    }

    fn read_rest(&mut self, c: &mut BodyCursor) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        loop {
            let at = out.len();
            out.resize(at + c.left as usize, 0);
            let n = c.left as usize;
            self.read_body(c, &mut out[at..at + n])?;
            if !c.more {
                return Ok(out);
            }
            self.next_frame(c)?;
        }
    }

    /// Send a value-returning request and stream the value straight from
    /// the socket into `buf[at..]`.
    fn read_value_into(&mut self, op: Opcode, body: &[u8], buf: &DirectBuffer, at: usize) -> Result<u64> {
        let room = buf.len().checked_sub(at).ok_or_else(|| ClientError::Range(format!("offset {at} beyond buffer")))?;
        let id = self.send_parts(op, &[body], Slot::Plain)?;
        self.drain_before(id)?;
        self.pending.remove(&id);
        let mut c = BodyCursor { request_id: id, left: 0, more: true };
        self.next_frame(&mut c)?;
        let mut head = [0u8; 4];
        self.read_body(&mut c, &mut head)?;
        let status = u16::from_le_bytes([head[0], head[1]]);
        if status != Status::Ok as u16 || head[2] != 3 {
            let mut whole = head.to_vec();
            whole.extend(self.read_rest(&mut c)?);
            let r = Response::decode(&whole).map_err(protocol)?;
            check(r.clone())?;
            return Err(unexpected(&r));
        }
        let mut len = [0u8; 8];
        self.read_body(&mut c, &mut len)?;
        let len = u64::from_le_bytes(len);
        if len > room as u64 {
            let skipped = self.read_rest(&mut c)?;
            debug_assert_eq!(skipped.len() as u64, len);
            return Err(ClientError::Range(format!("value of {len} bytes does not fit {room}")));
        }
        {
            let mut g = buf.lock();
            let dst = &mut g[at..at + len as usize];
            // the guard is held across the socket read so the bytes land in place
            let r = self.read_body(&mut c, dst);
            drop(g);
            r?;
        }
        if c.left != 0 || c.more {
            return Err(protocol("value response is longer than its length field"));
        }
        Ok(len)
    }

    fn registered_range(&self, buf: &DirectBuffer, start: usize, len: usize) -> Result<()> {
        let Some(&reg) = self.registered.get(&buf.id) else { return Err(ClientError::NotRegistered) };
        if start.checked_add(len).is_none_or(|end| end > reg || end > buf.len()) {
            return Err(ClientError::Range(format!("{start}+{len} outside the registered {reg} bytes")));
        }
        Ok(())
    }

    // pools

    /// Create a pool, or open it if the name exists.
    pub fn create_pool(&mut self, name: &str, size: u64) -> Result<Pool> {
        match self.call(&Request::CreatePool { name: name.into(), size })?.body {
            Body::Pool { id } => Ok(Pool(id)),
            b => Err(protocol(format!("unexpected body {b:?}"))),
        }
    }

    pub fn open_pool(&mut self, name: &str) -> Result<Pool> {
        match self.call(&Request::OpenPool { name: name.into() })?.body {
            Body::Pool { id } => Ok(Pool(id)),
            b => Err(protocol(format!("unexpected body {b:?}"))),
        }
    }

    pub fn close_pool(&mut self, pool: Pool) -> Result<()> {
        self.call(&Request::ClosePool { pool: pool.0 }).map(drop)
    }

    /// Delete a pool that no other session has open. Its memory is zeroed.
    pub fn delete_pool(&mut self, name: &str) -> Result<()> {
        self.call(&Request::DeletePool { name: name.into() }).map(drop)
    }

    pub fn configure_pool(&mut self, pool: Pool, setting: &str) -> Result<()> {
        self.call(&Request::ConfigurePool { pool: pool.0, setting: setting.into() }).map(drop)
    }

    // small values

    pub fn put(&mut self, pool: Pool, key: &[u8], value: &[u8]) -> Result<()> {
        self.put_flags(pool, key, value, 0)
    }

    pub fn put_flags(&mut self, pool: Pool, key: &[u8], value: &[u8], flags: u32) -> Result<()> {
        let id = self.async_put_flags(pool, key, value, flags)?;
        self.wait(id.id).and_then(check).map(drop)
    }

    /// The returned buffer counts as allocated until passed to [`Session::free_memory`].
    pub fn get(&mut self, pool: Pool, key: &[u8]) -> Result<Vec<u8>> {
        let r = self.call(&Request::Get { pool: pool.0, key: key.to_vec() })?;
        match r.body {
            Body::Value(v) => {
                self.memory.allocated += 1;
                self.memory.allocated_bytes += v.len() as u64;
                Ok(v)
            }
            _ => Err(unexpected(&r)),
        }
    }

    pub fn free_memory(&mut self, value: Vec<u8>) {
        self.memory.freed += 1;
        self.memory.freed_bytes += value.len() as u64;
    }

    pub fn memory_counters(&self) -> MemoryCounters {
        self.memory
    }

    pub fn erase(&mut self, pool: Pool, key: &[u8]) -> Result<()> {
        self.call(&Request::Erase { pool: pool.0, key: key.to_vec() }).map(drop)
    }

    pub fn get_attributes(&mut self, pool: Pool, key: &[u8]) -> Result<Attributes> {
        let r = self.call(&Request::GetAttributes { pool: pool.0, key: key.to_vec() })?;
        match r.body {
            Body::Attributes { value_len, write_time } => Ok(Attributes { value_len, write_time }),
            _ => Err(unexpected(&r)),
        }
    }

    pub fn get_statistics(&mut self) -> Result<BTreeMap<String, u64>> {
        let r = self.call(&Request::GetStatistics)?;
        match r.body {
            Body::Statistics(s) => Ok(s.into_iter().collect()),
            _ => Err(unexpected(&r)),
        }
    }

    /// Next key matching `expr` at or after position `begin` in the pool's
    /// secondary index, with the position to resume from.
    pub fn find(&mut self, pool: Pool, expr: &[u8], kind: MatchKind, begin: u64) -> Result<(Vec<u8>, u64)> {
        let r = self.call(&Request::Find { pool: pool.0, expr: expr.to_vec(), kind, begin })?;
        match r.body {
            Body::Found { key, next } => Ok((key, next)),
            _ => Err(unexpected(&r)),
        }
    }

    /// Every match, by repeated [`Session::find`].
    pub fn find_all(&mut self, pool: Pool, expr: &[u8], kind: MatchKind) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        let mut at = 0;
        loop {
            match self.find(pool, expr, kind, at) {
                Ok((k, next)) => {
                    out.push(k);
                    at = next;
                }
                Err(e) if e.status() == Some(Status::NoMatch) => return Ok(out),
                Err(e) => return Err(e),
            }
        }
    }

    // direct transfers

    /// Allow direct operations on `buf` through this session.
    pub fn register_direct_memory(&mut self, buf: &DirectBuffer) {
        self.registered.insert(buf.id, buf.len());
    }

    pub fn unregister_direct_memory(&mut self, buf: &DirectBuffer) -> bool {
        self.registered.remove(&buf.id).is_some()
    }

    /// Store `buf[start..start + len]` as the value of `key`.
    pub fn put_direct(&mut self, pool: Pool, key: &[u8], buf: &DirectBuffer, start: usize, len: usize) -> Result<()> {
        let h = self.async_put_direct(pool, key, buf, start, len)?;
        self.wait(h.id).and_then(check).map(drop)
    }

    /// Read the value of `key` into `buf[at..]`; returns its length.
    pub fn get_direct(&mut self, pool: Pool, key: &[u8], buf: &DirectBuffer, at: usize) -> Result<u64> {
        self.registered_range(buf, at, 0)?;
        let body = Request::GetDirect { pool: pool.0, key: key.to_vec() }.encode_body();
        self.read_value_into(Opcode::GetDirect, &body, buf, at)
    }

    /// Overwrite part of an existing value from `buf[start..start + len]`.
    pub fn put_direct_offset(
        &mut self,
        pool: Pool,
        key: &[u8],
        offset: u64,
        buf: &DirectBuffer,
        start: usize,
        len: usize,
    ) -> Result<()> {
        self.registered_range(buf, start, len)?;
        let head = put_direct_offset_head(pool.0, key, offset, len as u64);
        let g = buf.lock();
        let id = {
            let id = self.take_id();
            let mut w = BufWriter::with_capacity(64 << 10, &self.stream);
            write_message(&mut w, Opcode::PutDirectOffset, id, &[&head, &g[start..start + len]])?;
            w.flush()?;
            id
        };
        drop(g);
        self.pending.insert(id, Slot::Plain);
        self.wait(id).and_then(check).map(drop)
    }

    /// Read `len` bytes of the value from `offset` into `buf[at..]`.
    pub fn get_direct_offset(
        &mut self,
        pool: Pool,
        key: &[u8],
        offset: u64,
        len: u64,
        buf: &DirectBuffer,
        at: usize,
    ) -> Result<u64> {
        self.registered_range(buf, at, len.try_into().unwrap_or(usize::MAX))?;
        let body = Request::GetDirectOffset { pool: pool.0, key: key.to_vec(), offset, len }.encode_body();
        self.read_value_into(Opcode::GetDirectOffset, &body, buf, at)
    }

    // active data objects

    /// Run the pool's plugins on `key`. `value_size` > 0 (or
    /// [`ADO_CREATE_ON_DEMAND`]) creates an absent key with that many zero bytes.
    pub fn invoke_ado(
        &mut self,
        pool: Pool,
        key: &[u8],
        request: &[u8],
        flags: u32,
        value_size: u64,
    ) -> Result<Vec<Vec<u8>>> {
        let h = self.async_invoke_ado(pool, key, request, flags, value_size)?;
        self.ado_result(h.id)
    }

    /// Place `value` and then invoke. With [`ADO_DETACHED`] the value is
    /// handed to the plugin in its own allocation instead of becoming the
    /// key's value; `root_len` sizes a root that has to be created.
    pub fn invoke_put_ado(
        &mut self,
        pool: Pool,
        key: &[u8],
        request: &[u8],
        value: &[u8],
        root_len: u64,
        flags: u32,
    ) -> Result<Vec<Vec<u8>>> {
        let h = self.async_invoke_put_ado(pool, key, request, value, root_len, flags)?;
        self.ado_result(h.id)
    }

    fn ado_result(&mut self, id: u64) -> Result<Vec<Vec<u8>>> {
        let r = self.wait(id).and_then(check)?;
        match r.body {
            Body::Ado(v) => Ok(v),
            _ => Err(unexpected(&r)),
        }
    }

    // asynchronous variants

    pub fn async_put(&mut self, pool: Pool, key: &[u8], value: &[u8]) -> Result<AsyncHandle> {
        self.async_put_flags(pool, key, value, 0)
    }

    pub fn async_put_flags(&mut self, pool: Pool, key: &[u8], value: &[u8], flags: u32) -> Result<AsyncHandle> {
        let head = put_direct_head(pool.0, key, flags, value.len() as u64);
        let id = self.send_parts(Opcode::Put, &[&head, value], Slot::Plain)?;
        Ok(AsyncHandle { id })
    }

    pub fn async_get(&mut self, pool: Pool, key: &[u8]) -> Result<AsyncHandle> {
        let id = self.send(&Request::Get { pool: pool.0, key: key.to_vec() })?;
        Ok(AsyncHandle { id })
    }

    pub fn async_erase(&mut self, pool: Pool, key: &[u8]) -> Result<AsyncHandle> {
        let id = self.send(&Request::Erase { pool: pool.0, key: key.to_vec() })?;
        Ok(AsyncHandle { id })
    }

    pub fn async_put_direct(
        &mut self,
        pool: Pool,
        key: &[u8],
        buf: &DirectBuffer,
        start: usize,
        len: usize,
    ) -> Result<AsyncHandle> {
        self.registered_range(buf, start, len)?;
        let head = put_direct_head(pool.0, key, 0, len as u64);
        let g = buf.lock();
        let id = self.take_id();
        let mut w = BufWriter::with_capacity(64 << 10, &self.stream);
        write_message(&mut w, Opcode::PutDirect, id, &[&head, &g[start..start + len]])?;
        w.flush()?;
        drop(w);
        drop(g);
        self.pending.insert(id, Slot::Plain);
        Ok(AsyncHandle { id })
    }

    /// Completes with [`Completion::Copied`] once the value is in `buf[at..]`.
    pub fn async_get_direct(&mut self, pool: Pool, key: &[u8], buf: &DirectBuffer, at: usize) -> Result<AsyncHandle> {
        self.registered_range(buf, at, 0)?;
        let room = buf.len() - at;
        let body = Request::GetDirect { pool: pool.0, key: key.to_vec() }.encode_body();
        let slot = Slot::IntoBuffer { buf: buf.clone(), at, room };
        let id = self.send_parts(Opcode::GetDirect, &[&body], slot)?;
        Ok(AsyncHandle { id })
    }

    pub fn async_invoke_ado(
        &mut self,
        pool: Pool,
        key: &[u8],
        request: &[u8],
        flags: u32,
        value_size: u64,
    ) -> Result<AsyncHandle> {
        let req = Request::InvokeAdo { pool: pool.0, key: key.to_vec(), request: request.to_vec(), value_size, flags };
        let id = self.send(&req)?;
        Ok(AsyncHandle { id })
    }

    pub fn async_invoke_put_ado(
        &mut self,
        pool: Pool,
        key: &[u8],
        request: &[u8],
        value: &[u8],
        root_len: u64,
        flags: u32,
    ) -> Result<AsyncHandle> {
        let req = Request::InvokePutAdo {
            pool: pool.0,
            key: key.to_vec(),
            request: request.to_vec(),
            value: value.to_vec(),
            root_len,
            flags,
        };
        let id = self.send(&req)?;
        Ok(AsyncHandle { id })
    }

    fn completion(r: Response) -> Result<Completion> {
        let r = check(r)?;
        Ok(match r.body {
            Body::Empty => Completion::Done,
            Body::Value(v) => Completion::Value(v),
            Body::Ado(v) => Completion::Ado(v),
            // async_get_direct reports the copied length this way
            Body::Pool { id } => Completion::Copied(id),
            _ => return Err(unexpected(&r)),
        })
    }

    /// `Ok(None)` while the operation is in flight. Once it reports the
    /// outcome (success or the shard's error) the handle is spent.
    pub fn check_async_completion(&mut self, h: &AsyncHandle) -> Result<Option<Completion>> {
        if !self.done.contains_key(&h.id) {
            if !self.pending.contains_key(&h.id) {
                return Err(ClientError::UnknownHandle(h.id));
            }
            self.absorb()?;
            while !self.done.contains_key(&h.id) && self.fill(false)? {
                self.absorb()?;
            }
        }
        match self.done.remove(&h.id) {
            Some(r) => self.resolved(r).map(Some),
            None => Ok(None),
        }
    }

    /// Block until `h` completes.
    pub fn wait_for_completion(&mut self, h: AsyncHandle) -> Result<Completion> {
        let r = self.wait(h.id);
        self.resolved(r)
    }

    fn resolved(&mut self, r: Result<Response>) -> Result<Completion> {
        let c = Self::completion(r?)?;
        if let Completion::Value(v) = &c {
            self.memory.allocated += 1;
            self.memory.allocated_bytes += v.len() as u64;
        }
        Ok(c)
    }
}
