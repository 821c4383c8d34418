//! One shard: a single thread that owns an arena, its pools, their engines
//! and indexes, the lock table and the pools' ADOs, and serves any number of
//! TCP sessions.
//!
//! The loop accepts connections, takes at most one request per session per
//! pass (round robin), polls every ADO queue, and sleeps briefly only when a
//! pass made no progress. Every mutation is durable when the engine call
//! returns, and the response is queued only after that.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mcaslite_ado::host::AdoHost;
use mcaslite_ado::message::{AdoToShard, Bootstrap, CallbackRequest, ShardToAdo, WorkRequest};
use mcaslite_ado::plugins::SIGNAL_PREFIX;
use mcaslite_ado::{services, PluginRegistry};
use mcaslite_core::arena::PersistentArena;
use mcaslite_core::engine::pool::{self, PoolHeader, FLAG_INDEX};
use mcaslite_core::engine::{EngineKind, EngineOptions, KvEngine, ValueLoc, MAX_VALUE};
use mcaslite_core::index::SecondaryIndex;
use mcaslite_core::pmem::{ExtentView, Pmem};
use mcaslite_core::protocol::{
    decode_request, value_response_head, Body, Message, Opcode, Request, Response, Status, ADO_CREATE_ON_DEMAND,
    ADO_DETACHED, ADO_NO_OVERWRITE, CONFIG_ADD_INDEX, CONFIG_REMOVE_INDEX, PUT_NO_OVERWRITE, SMALL_VALUE_LIMIT,
    VERSION,
};
use mcaslite_core::Error;

use crate::config::Signal;
use crate::locks::{LockTable, Mode};
use crate::session::{Session, OUT_LIMIT};
use crate::stats::Stats;

#[derive(Clone, Debug)]
pub enum AdoMode {
    /// Plugins run on a thread of the server process over the same memory.
    Thread,
    /// Plugins run in `exe`, which maps the arena file; queue segments are
    /// created in `dir`.
    Process { exe: PathBuf, dir: PathBuf },
}

#[derive(Clone)]
pub struct ShardSpec {
    pub id: u32,
    pub bind: SocketAddr,
    pub pmem: Pmem,
    pub backend: EngineKind,
    pub core: Option<usize>,
    pub plugins: Vec<String>,
    pub params: BTreeMap<String, String>,
    pub signals: BTreeSet<Signal>,
    pub ado: AdoMode,
    pub registry: PluginRegistry,
    pub engine: EngineOptions,
}

impl ShardSpec {
    /// Loopback shard on an ephemeral port with no plugins.
    pub fn local(pmem: Pmem) -> Self {
        Self {
            id: 0,
            bind: "127.0.0.1:0".parse().expect("addr"),
            pmem,
            backend: EngineKind::HStore,
            core: None,
            plugins: Vec::new(),
            params: BTreeMap::new(),
            signals: BTreeSet::new(),
            ado: AdoMode::Thread,
            registry: crate::default_registry(),
            engine: EngineOptions::default(),
        }
    }
}

#[derive(Default)]
struct Control {
    stop: AtomicBool,
    kill: AtomicBool,
}

/// A running shard thread.
pub struct ShardHandle {
    id: u32,
    addr: SocketAddr,
    pmem: Pmem,
    control: Arc<Control>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ShardHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardHandle").field("id", &self.id).field("addr", &self.addr).finish()
    }
}

impl ShardHandle {
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// The shard's memory; with the crash simulator this is where crash
    /// images come from.
    pub fn pmem(&self) -> &Pmem {
        &self.pmem
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }

    /// Close sessions and ADOs, then join.
    pub fn stop(mut self) {
        self.halt(false);
    }

    /// Stop at the next loop pass without any orderly shutdown, as if the
    /// process had died. Pending flushes stay pending.
    pub fn kill(mut self) {
        self.halt(true);
    }

    /// Block until the shard thread exits on its own.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn halt(&mut self, kill: bool) {
        if kill {
            self.control.kill.store(true, Ordering::Release);
        }
        self.control.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ShardHandle {
    fn drop(&mut self) {
        self.halt(false);
    }
}

/// Recover the arena and its pools, bind, and start the shard thread.
pub fn start_shard(spec: ShardSpec) -> Result<ShardHandle, crate::ServerError> {
    let listener = TcpListener::bind(spec.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let pmem = spec.pmem.clone();
    let control = Arc::new(Control::default());
    let mut shard = Shard::open(spec, listener, control.clone())?;
    let id = shard.spec.id;
    let thread = std::thread::Builder::new().name(format!("shard-{id}")).spawn(move || shard.run())?;
    log::info!("shard {id} listening on {addr}");
    Ok(ShardHandle { id, addr, pmem, control, thread: Some(thread) })
}

struct Pending {
    session: u64,
    request_id: u64,
    op: &'static str,
    started: Instant,
    kind: PendingKind,
}

enum PendingKind {
    Invoke { key: Vec<u8>, request: Vec<u8>, value_size: u64, flags: u32 },
    InvokePut { key: Vec<u8>, request: Vec<u8>, value: Vec<u8>, root_len: u64, flags: u32 },
    /// Relayed put or erase; `reply` goes to the client once the plugin is done.
    Signal { key: Vec<u8>, signal: Signal, reply: Response },
}

struct InFlight {
    work_id: u64,
    session: u64,
    request_id: u64,
    op: &'static str,
    started: Instant,
    signal_reply: Option<Response>,
}

struct PoolState {
    header: PoolHeader,
    base: u64,
    engine: Box<dyn KvEngine>,
    index: Option<SecondaryIndex>,
    openers: BTreeSet<u64>,
    ado: Option<AdoHost>,
    inflight: Option<InFlight>,
    queue: VecDeque<Pending>,
}

enum Outcome {
    Reply(Response),
    /// Successful value read, streamed from the buffer.
    Value(Vec<u8>),
    Parked,
    Close(Response),
}

fn reply_err(e: Error) -> Outcome {
    Outcome::Reply(Response::from_error(&e))
}

fn op_name(op: Opcode) -> &'static str {
    match op {
        Opcode::Handshake => "handshake",
        Opcode::CreatePool => "create_pool",
        Opcode::OpenPool => "open_pool",
        Opcode::ClosePool => "close_pool",
        Opcode::DeletePool => "delete_pool",
        Opcode::ConfigurePool => "configure_pool",
        Opcode::Put => "put",
        Opcode::Get => "get",
        Opcode::Erase => "erase",
        Opcode::PutDirect => "put_direct",
        Opcode::GetDirect => "get_direct",
        Opcode::PutDirectOffset => "put_direct_offset",
        Opcode::GetDirectOffset => "get_direct_offset",
        Opcode::InvokeAdo => "invoke_ado",
        Opcode::InvokePutAdo => "invoke_put_ado",
        Opcode::GetAttributes => "get_attributes",
        Opcode::GetStatistics => "get_statistics",
        Opcode::Find => "find",
        Opcode::Response => "response",
    }
}

struct Shard {
    spec: ShardSpec,
    arena: PersistentArena,
    listener: TcpListener,
    control: Arc<Control>,
    sessions: Vec<Session>,
    next_session: u64,
    rr: usize,
    pools: HashMap<u64, PoolState>,
    names: HashMap<String, u64>,
    locks: LockTable,
    stats: Stats,
    next_work: u64,
}

impl Shard {
    fn open(spec: ShardSpec, listener: TcpListener, control: Arc<Control>) -> Result<Self, crate::ServerError> {
        let mut arena = PersistentArena::open(spec.pmem.clone())?;
        let mut pools = HashMap::new();
        let mut names = HashMap::new();
        for h in pool::scan_pools(&mut arena)? {
            let (header, engine) = match pool::open_pool(&arena, h.id, &spec.engine) {
                Ok(p) => p,
                Err(e) => {
                    log::error!("shard {}: pool {:?} does not open: {e}", spec.id, h.name);
                    continue;
                }
            };
            let base = engine.extents()[0].0;
            let index = if pool::read_flags(arena.pmem(), base)? & FLAG_INDEX != 0 {
                Some(SecondaryIndex::from_keys(engine.iterate()?.into_iter().map(|(k, _, _)| k)))
            } else {
                None
            };
            names.insert(header.name.clone(), header.id);
            pools.insert(
                header.id,
                PoolState {
                    header,
                    base,
                    engine,
                    index,
                    openers: BTreeSet::new(),
                    ado: None,
                    inflight: None,
                    queue: VecDeque::new(),
                },
            );
        }
        log::info!("shard {}: recovered {} pools", spec.id, pools.len());
        Ok(Self {
            spec,
            arena,
            listener,
            control,
            sessions: Vec::new(),
            next_session: 1,
            rr: 0,
            pools,
            names,
            locks: LockTable::default(),
            stats: Stats::default(),
            next_work: 1,
        })
    }

    fn run(&mut self) {
        if let Some(core) = self.spec.core {
            pin_to_core(core);
        }
        let mut idle = 0u32;
        loop {
            if self.control.kill.load(Ordering::Acquire) {
                return;
            }
            if self.control.stop.load(Ordering::Acquire) {
                self.shutdown();
                return;
            }
            let mut busy = self.accept();
            busy |= self.poll_ados();
            busy |= self.serve_sessions();
            if busy {
                idle = 0;
            } else {
                idle = idle.saturating_add(1);
                match idle {
                    0..=32 => std::hint::spin_loop(),
                    33..=64 => std::thread::yield_now(),
                    _ => std::thread::sleep(Duration::from_micros(if idle < 2000 { 20 } else { 500 })),
                }
            }
        }
    }

    fn shutdown(&mut self) {
        for s in &mut self.sessions {
            s.flush();
            s.shutdown();
        }
        self.sessions.clear();
        for p in self.pools.values_mut() {
            p.ado = None;
        }
    }

    fn accept(&mut self) -> bool {
        let mut any = false;
        loop {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let id = self.next_session;
                    self.next_session += 1;
                    match Session::new(id, stream) {
                        Ok(s) => {
                            log::debug!("shard {}: session {id} from {peer}", self.spec.id);
                            self.sessions.push(s);
                            self.stats.add("sessions_opened", 1);
                            any = true;
                        }
                        Err(e) => log::warn!("shard {}: dropping connection from {peer}: {e}", self.spec.id),
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return any,
                Err(e) => {
                    log::warn!("shard {}: accept failed: {e}", self.spec.id);
                    return any;
                }
            }
        }
    }

    fn serve_sessions(&mut self) -> bool {
        let n = self.sessions.len();
        if n == 0 {
            return false;
        }
        let mut busy = false;
        self.rr = (self.rr + 1) % n;
        for k in 0..n {
            let i = (self.rr + k) % n;
            busy |= self.sessions[i].flush();
            busy |= self.sessions[i].fill();
            let s = &mut self.sessions[i];
            if s.parked || s.dead || s.closing || s.backlog() > OUT_LIMIT {
                continue;
            }
            let msg = match s.next_message() {
                Ok(Some(m)) => m,
                Ok(None) => continue,
                Err(e) => {
                    log::debug!("shard {}: session {} protocol error: {e}", self.spec.id, s.id);
                    self.stats.add("protocol_errors", 1);
                    s.respond(0, &Response { status: Status::Protocol, body: Body::Message(e.to_string()) });
                    s.closing = true;
                    s.flush();
                    continue;
                }
            };
            busy = true;
            let id = s.id;
            self.dispatch(i, id, msg);
            busy |= self.sessions[i].flush();
        }
        let before = self.sessions.len();
        let mut gone = Vec::new();
        self.sessions.retain(|s| {
            if s.dead {
                gone.push((s.id, s.pools.clone()));
            }
            !s.dead
        });
        for (id, pools) in gone {
            for p in pools {
                self.release_pool(id, p);
            }
        }
        busy || before != self.sessions.len()
    }

    fn dispatch(&mut self, i: usize, session: u64, msg: Message) {
        let started = Instant::now();
        let req = match decode_request(&msg) {
            Ok(r) => r,
            Err(e) => {
                self.stats.add("protocol_errors", 1);
                let s = &mut self.sessions[i];
                s.respond(msg.request_id, &Response { status: Status::Protocol, body: Body::Message(e.0) });
                s.closing = true;
                return;
            }
        };
        let op = op_name(msg.opcode);
        let outcome = self.handle(i, session, msg.request_id, op, started, req);
        let s = &mut self.sessions[i];
        match outcome {
            Outcome::Reply(r) => {
                if r.status != Status::Ok {
                    self.stats.add("errors", 1);
                }
                s.respond(msg.request_id, &r);
            }
            Outcome::Value(v) => {
                self.stats.add("bytes_out", v.len() as u64);
                s.send_parts(msg.request_id, &[&value_response_head(v.len() as u64), &v]);
            }
            // parked (and possibly already answered) by enqueue
            Outcome::Parked => return,
            Outcome::Close(r) => {
                s.respond(msg.request_id, &r);
                s.closing = true;
            }
        }
        self.stats.op(op, started.elapsed());
    }

    /// The session must have the pool open.
    fn pool_of(&mut self, i: usize, pool: u64) -> Result<&mut PoolState, Error> {
        if !self.sessions[i].pools.contains(&pool) {
            return Err(Error::UnknownPool(pool));
        }
        self.pools.get_mut(&pool).ok_or(Error::UnknownPool(pool))
    }

    fn handle(&mut self, i: usize, session: u64, request_id: u64, op: &'static str, started: Instant, req: Request) -> Outcome {
        match req {
            Request::Handshake { version } => {
                if version != VERSION as u32 {
                    return Outcome::Close(Response {
                        status: Status::Protocol,
                        body: Body::Message(format!("protocol version {version} is not supported; this shard speaks {VERSION}")),
                    });
                }
                Outcome::Reply(Response::ok(Body::Handshake { version: VERSION as u32, shard: self.spec.id }))
            }
            Request::CreatePool { name, size } => match self.create_pool(session, i, &name, size) {
                Ok(id) => Outcome::Reply(Response::ok(Body::Pool { id })),
                Err(e) => reply_err(e),
            },
            Request::OpenPool { name } => match self.names.get(&name).copied() {
                Some(id) => {
                    self.attach(session, i, id);
                    Outcome::Reply(Response::ok(Body::Pool { id }))
                }
                None => Outcome::Reply(Response { status: Status::BadPool, body: Body::Message(format!("no pool {name:?}")) }),
            },
            Request::ClosePool { pool } => {
                if !self.sessions[i].pools.remove(&pool) {
                    return reply_err(Error::UnknownPool(pool));
                }
                self.release_pool(session, pool);
                Outcome::Reply(Response::ok(Body::Empty))
            }
            Request::DeletePool { name } => match self.delete_pool(session, i, &name) {
                Ok(freed) => {
                    self.stats.add("bytes_released", freed);
                    Outcome::Reply(Response::ok(Body::Empty))
                }
                Err(r) => Outcome::Reply(r),
            },
            Request::ConfigurePool { pool, setting } => match self.configure(i, pool, &setting) {
                Ok(()) => Outcome::Reply(Response::ok(Body::Empty)),
                Err(e) => reply_err(e),
            },
            Request::Put { pool, key, value, flags } | Request::PutDirect { pool, key, value, flags } => {
                let limit = if op == "put" { SMALL_VALUE_LIMIT } else { MAX_VALUE + 1 };
                if value.len() as u64 >= limit {
                    return reply_err(Error::TooLarge);
                }
                self.stats.add("bytes_in", value.len() as u64);
                let r = self.pool_of(i, pool).map(|_| ()).and_then(|_| self.locks.check_client(pool, &key, true));
                if let Err(e) = r {
                    return reply_err(e);
                }
                let p = self.pools.get_mut(&pool).expect("checked");
                match p.engine.put(&key, &value, flags & PUT_NO_OVERWRITE != 0) {
                    Ok(()) => {
                        if let Some(ix) = p.index.as_mut() {
                            ix.insert(&key);
                        }
                        self.after_mutation(i, pool, session, request_id, op, started, key, Signal::PostPut)
                    }
                    Err(e) => reply_err(e),
                }
            }
            Request::Get { pool, key } | Request::GetDirect { pool, key } => {
                let small = op == "get";
                let r = self.pool_of(i, pool).map(|_| ()).and_then(|_| self.locks.check_client(pool, &key, false));
                if let Err(e) = r {
                    return reply_err(e);
                }
                let p = &self.pools[&pool];
                match p.engine.locate(&key) {
                    Ok(loc) if small && loc.len >= SMALL_VALUE_LIMIT => reply_err(Error::TooLarge),
                    Ok(_) => match p.engine.get(&key) {
                        Ok(v) => Outcome::Value(v),
                        Err(e) => reply_err(e),
                    },
                    Err(e) => reply_err(e),
                }
            }
            Request::Erase { pool, key } => {
                let r = self.pool_of(i, pool).map(|_| ()).and_then(|_| self.locks.check_client(pool, &key, true));
                if let Err(e) = r {
                    return reply_err(e);
                }
                let p = self.pools.get_mut(&pool).expect("checked");
                match p.engine.erase(&key) {
                    Ok(()) => {
                        if let Some(ix) = p.index.as_mut() {
                            ix.remove(&key);
                        }
                        self.after_mutation(i, pool, session, request_id, op, started, key, Signal::PostErase)
                    }
                    Err(e) => reply_err(e),
                }
            }
            Request::PutDirectOffset { pool, key, offset, data } => {
                self.stats.add("bytes_in", data.len() as u64);
                let r = self.pool_of(i, pool).map(|_| ()).and_then(|_| self.locks.check_client(pool, &key, true));
                if let Err(e) = r {
                    return reply_err(e);
                }
                match self.pools.get_mut(&pool).expect("checked").engine.write_range(&key, offset, &data) {
                    Ok(()) => Outcome::Reply(Response::ok(Body::Empty)),
                    Err(e) => reply_err(e),
                }
            }
            Request::GetDirectOffset { pool, key, offset, len } => {
                let r = self.pool_of(i, pool).map(|_| ()).and_then(|_| self.locks.check_client(pool, &key, false));
                if let Err(e) = r {
                    return reply_err(e);
                }
                match self.pools[&pool].engine.read_range(&key, offset, len) {
                    Ok(v) => Outcome::Value(v),
                    Err(e) => reply_err(e),
                }
            }
            Request::InvokeAdo { pool, key, request, value_size, flags } => {
                self.enqueue(i, pool, session, request_id, op, started, PendingKind::Invoke { key, request, value_size, flags })
            }
            Request::InvokePutAdo { pool, key, request, value, root_len, flags } => {
                if value.len() as u64 > MAX_VALUE {
                    return reply_err(Error::TooLarge);
                }
                self.stats.add("bytes_in", value.len() as u64);
                let kind = PendingKind::InvokePut { key, request, value, root_len, flags };
                self.enqueue(i, pool, session, request_id, op, started, kind)
            }
            Request::GetAttributes { pool, key } => match self.pool_of(i, pool).and_then(|p| p.engine.attributes(&key)) {
                Ok(a) => Outcome::Reply(Response::ok(Body::Attributes { value_len: a.value_len, write_time: a.write_time })),
                Err(e) => reply_err(e),
            },
            Request::GetStatistics => {
                let gauges = [
                    ("sessions", self.sessions.len() as u64),
                    ("pools", self.pools.len() as u64),
                    ("locks_held", self.locks.held() as u64),
                    ("lock_audit_ok", self.locks.audit().is_ok() as u64),
                    ("arena_free_bytes", self.arena.free_bytes()),
                    ("shard", self.spec.id as u64),
                ];
                Outcome::Reply(Response::ok(Body::Statistics(self.stats.snapshot(&gauges))))
            }
            Request::Find { pool, expr, kind, begin } => {
                let r = self.pool_of(i, pool).and_then(|p| p.index.as_ref().ok_or(Error::NoIndex)?.find(&expr, kind, begin));
                match r {
                    Ok((key, next)) => Outcome::Reply(Response::ok(Body::Found { key, next })),
                    Err(e) => reply_err(e),
                }
            }
        }
    }

    fn attach(&mut self, session: u64, i: usize, id: u64) {
        self.sessions[i].pools.insert(id);
        if let Some(p) = self.pools.get_mut(&id) {
            p.openers.insert(session);
        }
    }

    fn create_pool(&mut self, session: u64, i: usize, name: &str, size: u64) -> Result<u64, Error> {
        if let Some(&id) = self.names.get(name) {
            self.attach(session, i, id);
            return Ok(id);
        }
        if size == 0 {
            return Err(Error::Invalid("pool size must be positive".into()));
        }
        let (header, engine) = pool::create_pool(&mut self.arena, name, size, self.spec.backend, &self.spec.engine)?;
        let id = header.id;
        let base = engine.extents()[0].0;
        self.names.insert(name.to_string(), id);
        self.pools.insert(
            id,
            PoolState {
                header,
                base,
                engine,
                index: None,
                openers: BTreeSet::new(),
                ado: None,
                inflight: None,
                queue: VecDeque::new(),
            },
        );
        self.attach(session, i, id);
        Ok(id)
    }

    /// A session let go of a pool (close or disconnect). The pool's ADO
    /// stops once nobody has the pool open and no work is left.
    fn release_pool(&mut self, session: u64, id: u64) {
        if let Some(p) = self.pools.get_mut(&id) {
            p.openers.remove(&session);
            if p.openers.is_empty() && p.inflight.is_none() && p.queue.is_empty() && p.ado.is_some() {
                p.ado = None;
                log::debug!("shard {}: ADO for pool {:?} stopped", self.spec.id, p.header.name);
            }
        }
    }

    fn delete_pool(&mut self, session: u64, i: usize, name: &str) -> Result<u64, Response> {
        let Some(&id) = self.names.get(name) else {
            return Err(Response { status: Status::BadPool, body: Body::Message(format!("no pool {name:?}")) });
        };
        let p = &self.pools[&id];
        if p.openers.iter().any(|&s| s != session) || p.inflight.is_some() || !p.queue.is_empty() {
            return Err(Response { status: Status::Busy, body: Body::Message(format!("pool {name:?} is in use")) });
        }
        self.sessions[i].pools.remove(&id);
        let state = self.pools.remove(&id).expect("present");
        self.names.remove(name);
        drop(state);
        pool::delete_pool(&mut self.arena, id).map_err(|e| Response::from_error(&e))
    }

    fn configure(&mut self, i: usize, pool: u64, setting: &str) -> Result<(), Error> {
        let pmem = self.arena.pmem().clone();
        let p = self.pool_of(i, pool)?;
        let flags = pool::read_flags(&pmem, p.base)?;
        match setting {
            CONFIG_ADD_INDEX => {
                if p.index.is_some() {
                    return Err(Error::AlreadyAttached);
                }
                p.index = Some(SecondaryIndex::from_keys(p.engine.iterate()?.into_iter().map(|(k, _, _)| k)));
                pool::write_flags(&pmem, p.base, flags | FLAG_INDEX)
            }
            s if s.starts_with(CONFIG_REMOVE_INDEX) => {
                if p.index.take().is_none() {
                    return Err(Error::NoIndex);
                }
                pool::write_flags(&pmem, p.base, flags & !FLAG_INDEX)
            }
            s => Err(Error::Invalid(format!("unknown setting {s:?}"))),
        }
    }

    /// Reply to a put or erase, or park it behind its signal.
    #[allow(clippy::too_many_arguments)]
    fn after_mutation(
        &mut self,
        i: usize,
        pool: u64,
        session: u64,
        request_id: u64,
        op: &'static str,
        started: Instant,
        key: Vec<u8>,
        signal: Signal,
    ) -> Outcome {
        let reply = Response::ok(Body::Empty);
        if !self.spec.signals.contains(&signal) || self.spec.plugins.is_empty() {
            return Outcome::Reply(reply);
        }
        self.stats.add("signals", 1);
        self.sessions[i].parked = true;
        let p = self.pools.get_mut(&pool).expect("open pool");
        p.queue.push_back(Pending { session, request_id, op, started, kind: PendingKind::Signal { key, signal, reply } });
        self.pump(pool);
        Outcome::Parked
    }

    #[allow(clippy::too_many_arguments)]
    fn enqueue(
        &mut self,
        i: usize,
        pool: u64,
        session: u64,
        request_id: u64,
        op: &'static str,
        started: Instant,
        kind: PendingKind,
    ) -> Outcome {
        if let Err(e) = self.pool_of(i, pool) {
            return reply_err(e);
        }
        if self.spec.plugins.is_empty() {
            return Outcome::Reply(Response { status: Status::AdoFault, body: Body::Message("no ADO plugins configured".into()) });
        }
        self.sessions[i].parked = true;
        self.pools.get_mut(&pool).expect("checked").queue.push_back(Pending { session, request_id, op, started, kind });
        self.pump(pool);
        Outcome::Parked
    }

    /// Start queued work while the pool's ADO is idle.
    fn pump(&mut self, pool: u64) {
        loop {
            let Some(p) = self.pools.get_mut(&pool) else { return };
            if p.inflight.is_some() {
                return;
            }
            let Some(next) = p.queue.pop_front() else { return };
            let (session, request_id, op, started) = (next.session, next.request_id, next.op, next.started);
            if let Err(r) = self.start_work(pool, next) {
                self.finish(session, request_id, op, started, r);
            }
        }
    }

    fn start_work(&mut self, pool: u64, pending: Pending) -> Result<(), Response> {
        let work_id = self.next_work;
        self.next_work += 1;
        let Pending { session, request_id, op, started, kind } = pending;
        let (mode, key) = match &kind {
            PendingKind::Signal { key, .. } => (Mode::Read, key.clone()),
            PendingKind::Invoke { key, .. } | PendingKind::InvokePut { key, .. } => (Mode::Write, key.clone()),
        };
        let signal_reply = match &kind {
            PendingKind::Signal { reply, .. } => Some(reply.clone()),
            _ => None,
        };
        // a failed signal still answers with the original status
        let fail = |r: Response| signal_reply.clone().unwrap_or(r);
        self.locks.lock(pool, &key, mode, work_id).map_err(|e| fail(Response::from_error(&e)))?;
        let work = match self.prepare(pool, work_id, kind) {
            Ok(w) => w,
            Err(e) => {
                self.locks.release_all(work_id);
                return Err(fail(Response::from_error(&e)));
            }
        };
        if let Err(m) = self.send_work(pool, work) {
            self.locks.release_all(work_id);
            self.stats.add("ado_faults", 1);
            log::warn!("shard {}: ADO for pool {pool} failed: {m}", self.spec.id);
            return Err(fail(Response { status: Status::AdoFault, body: Body::Message(m) }));
        }
        let p = self.pools.get_mut(&pool).expect("pool");
        p.inflight = Some(InFlight { work_id, session, request_id, op, started, signal_reply });
        Ok(())
    }

    /// Engine side of an invoke: find or create the root, place any value.
    fn prepare(&mut self, pool: u64, work_id: u64, kind: PendingKind) -> Result<WorkRequest, Error> {
        let p = self.pools.get_mut(&pool).expect("pool");
        let e = p.engine.as_mut();
        let mut created = false;
        let (key, request, detached, signal) = match kind {
            PendingKind::Invoke { key, request, value_size, flags } => {
                if let Err(Error::KeyNotFound) = e.locate(&key) {
                    if flags & ADO_CREATE_ON_DEMAND == 0 && value_size == 0 {
                        return Err(Error::KeyNotFound);
                    }
                    created = e.create_key(&key, value_size)?.1;
                }
                (key, request, None, false)
            }
            PendingKind::InvokePut { key, request, value, root_len, flags } => {
                let exists = e.locate(&key).is_ok();
                if flags & ADO_DETACHED != 0 {
                    if !exists {
                        created = e.create_key(&key, if root_len == 0 { value.len() as u64 } else { root_len })?.1;
                    }
                    let off = e.allocate_memory((value.len() as u64).max(1))?;
                    if let Err(err) = e.pmem().write_persist(off, &value) {
                        let _ = e.free_memory(off, (value.len() as u64).max(1));
                        return Err(err);
                    }
                    (key, request, Some(ValueLoc { offset: off, len: value.len() as u64 }), false)
                } else {
                    if !exists {
                        created = e.create_key(&key, root_len.max(value.len() as u64))?.1;
                        e.write_range(&key, 0, &value)?;
                    } else if flags & ADO_NO_OVERWRITE == 0 {
                        e.put(&key, &value, false)?;
                    }
                    (key, request, None, false)
                }
            }
            PendingKind::Signal { key, signal, .. } => {
                let request = [SIGNAL_PREFIX, b"::", signal.name().as_bytes()].concat();
                (key, request, None, true)
            }
        };
        if created {
            if let Some(ix) = p.index.as_mut() {
                ix.insert(&key);
            }
        }
        let values = match e.locate_stable(&key) {
            Ok(v) => vec![v],
            Err(Error::KeyNotFound) if signal => Vec::new(),
            Err(err) => return Err(err),
        };
        Ok(WorkRequest { work_id, key, values, detached, request, new_root: created, signal })
    }

    fn send_work(&mut self, pool: u64, work: WorkRequest) -> Result<(), String> {
        let needs_launch = self.pools.get_mut(&pool).expect("pool").ado.as_mut().map_or(true, |a| !a.is_alive());
        if needs_launch {
            let host = self.launch_ado(pool)?;
            self.stats.add("ado_launches", 1);
            self.pools.get_mut(&pool).expect("pool").ado = Some(host);
        }
        let p = self.pools.get_mut(&pool).expect("pool");
        let ado = p.ado.as_mut().expect("launched");
        ado.send(&ShardToAdo::Work(work)).map_err(|e| {
            p.ado = None;
            e.to_string()
        })
    }

    fn launch_ado(&mut self, pool: u64) -> Result<AdoHost, String> {
        let p = &self.pools[&pool];
        let extents = p.engine.extents().to_vec();
        let pmem = self.arena.pmem().clone();
        let mut boot = Bootstrap {
            shard: self.spec.id,
            pool,
            extents: extents.clone(),
            arena_path: None,
            plugins: self.spec.plugins.clone(),
            params: self.spec.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        };
        let r = match (&self.spec.ado, pmem.path()) {
            (AdoMode::Process { exe, dir }, Some(path)) => {
                boot.arena_path = Some(path.display().to_string());
                AdoHost::spawn_process(boot, exe, dir)
            }
            _ => AdoHost::spawn_thread(boot, self.spec.registry.clone(), Box::new(ExtentView::new(pmem, extents))),
        };
        r.map_err(|e| e.to_string())
    }

    fn poll_ados(&mut self) -> bool {
        let ids: Vec<u64> = self.pools.iter().filter(|(_, p)| p.inflight.is_some()).map(|(&id, _)| id).collect();
        let mut busy = false;
        for id in ids {
            loop {
                let Some(p) = self.pools.get_mut(&id) else { break };
                let Some(ado) = p.ado.as_mut() else {
                    self.fail_inflight(id, "ADO is not running".into());
                    break;
                };
                match ado.poll() {
                    Ok(None) => break,
                    Ok(Some(AdoToShard::Callback { work_id, request })) => {
                        busy = true;
                        let result = self.callback(id, work_id, &request);
                        let p = self.pools.get_mut(&id).expect("pool");
                        let sent = p.ado.as_mut().map(|a| a.send(&ShardToAdo::CallbackReply { work_id, result }));
                        if let Some(Err(e)) = sent {
                            self.fail_inflight(id, format!("ADO lost during callback: {e}"));
                            break;
                        }
                    }
                    Ok(Some(AdoToShard::Complete { work_id, result, .. })) => {
                        busy = true;
                        self.complete(id, work_id, result);
                        break;
                    }
                    Ok(Some(m)) => {
                        log::warn!("shard {}: unexpected ADO message {m:?}", self.spec.id);
                    }
                    Err(e) => {
                        busy = true;
                        self.fail_inflight(id, format!("ADO died: {e}"));
                        break;
                    }
                }
            }
        }
        busy
    }

    fn callback(&mut self, pool: u64, work_id: u64, req: &CallbackRequest) -> services::Reply {
        self.stats.add("ado_callbacks", 1);
        let p = self.pools.get_mut(&pool).expect("pool");
        if p.inflight.as_ref().map(|f| f.work_id) != Some(work_id) {
            return Err((Status::Invalid, format!("work {work_id} is not in flight")));
        }
        let locked_key = match req {
            CallbackRequest::CreateKey { key, .. }
            | CallbackRequest::OpenKey { key }
            | CallbackRequest::EraseKey { key }
            | CallbackRequest::ResizeValue { key, .. } => Some(key),
            CallbackRequest::Unlock { key } => {
                return if self.locks.unlock(pool, key, work_id) {
                    Ok(mcaslite_ado::CallbackResult::Done)
                } else {
                    Err((Status::Invalid, "key is not locked by this work".into()))
                };
            }
            _ => None,
        };
        let fresh = match locked_key {
            Some(k) => match self.locks.lock(pool, k, Mode::Write, work_id) {
                Ok(fresh) => fresh,
                Err(e) => return Err(((&e).into(), e.to_string())),
            },
            None => false,
        };
        let r = services::execute(p.engine.as_mut(), p.index.as_mut(), req);
        if let Some(k) = locked_key {
            let erased = matches!(req, CallbackRequest::EraseKey { .. }) && r.is_ok();
            if erased || (fresh && r.is_err()) {
                self.locks.unlock(pool, k, work_id);
            }
        }
        r
    }

    fn complete(&mut self, pool: u64, work_id: u64, result: Result<Vec<Vec<u8>>, String>) {
        let p = self.pools.get_mut(&pool).expect("pool");
        let Some(f) = p.inflight.take_if_id(work_id) else {
            log::warn!("shard {}: completion for unknown work {work_id}", self.spec.id);
            return;
        };
        self.locks.release_all(work_id);
        debug_assert!(self.locks.audit().is_ok());
        let reply = match (f.signal_reply, result) {
            (Some(r), Ok(_)) => r,
            (Some(r), Err(m)) => {
                self.stats.add("ado_faults", 1);
                log::warn!("shard {}: signal work {work_id} failed: {m}", self.spec.id);
                r
            }
            (None, Ok(v)) => Response::ok(Body::Ado(v)),
            (None, Err(m)) => {
                self.stats.add("ado_faults", 1);
                Response { status: Status::AdoFault, body: Body::Message(m) }
            }
        };
        self.finish(f.session, f.request_id, f.op, f.started, reply);
        self.pump(pool);
        self.idle_check(pool);
    }

    fn fail_inflight(&mut self, pool: u64, why: String) {
        log::warn!("shard {}: pool {pool}: {why}", self.spec.id);
        let p = self.pools.get_mut(&pool).expect("pool");
        p.ado = None;
        if let Some(f) = p.inflight.take() {
            self.stats.add("ado_faults", 1);
            self.locks.release_all(f.work_id);
            let reply = f.signal_reply.unwrap_or(Response { status: Status::AdoFault, body: Body::Message(why) });
            self.finish(f.session, f.request_id, f.op, f.started, reply);
        }
        self.pump(pool);
        self.idle_check(pool);
    }

    fn idle_check(&mut self, pool: u64) {
        if let Some(p) = self.pools.get_mut(&pool) {
            if p.openers.is_empty() && p.inflight.is_none() && p.queue.is_empty() {
                p.ado = None;
            }
        }
    }

    /// Answer a parked request and let its session continue.
    fn finish(&mut self, session: u64, request_id: u64, op: &'static str, started: Instant, r: Response) {
        if r.status != Status::Ok {
            self.stats.add("errors", 1);
        }
        self.stats.op(op, started.elapsed());
        if let Some(s) = self.sessions.iter_mut().find(|s| s.id == session) {
            s.respond(request_id, &r);
            s.parked = false;
            s.flush();
        }
    }
}

trait TakeIf {
    fn take_if_id(&mut self, work_id: u64) -> Option<InFlight>;
}

impl TakeIf for Option<InFlight> {
    fn take_if_id(&mut self, work_id: u64) -> Option<InFlight> {
        if self.as_ref().is_some_and(|f| f.work_id == work_id) {
            self.take()
        } else {
            None
        }
    }
}

/// Advisory: failure only costs locality.
fn pin_to_core(core: usize) {
    #[cfg(target_os = "linux")]
    // SAFETY: cpu_set_t is plain data; sched_setaffinity only reads it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            log::debug!("cannot pin shard to core {core}");
        }
    }
    #[cfg(not(target_os = "linux"))]
    let _ = core;
}
