//! Messages carried over the shard/ADO queue pair.
//!
//! Every message starts with a one-byte tag; fields use the shared codec.
//! Values are named by absolute arena offsets, which both sides translate
//! through their own mapping of the pool's extents.

use mcaslite_core::codec::{perr, Dec, Enc, ProtocolError};
use mcaslite_core::engine::ValueLoc;
use mcaslite_core::index::MatchKind;
use mcaslite_core::protocol::Status;

/// Everything the ADO needs before its first work item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bootstrap {
    pub shard: u32,
    pub pool: u64,
    pub extents: Vec<(u64, u64)>,
    /// Arena file to map; absent when the ADO shares the shard's memory.
    pub arena_path: Option<String>,
    pub plugins: Vec<String>,
    pub params: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkRequest {
    pub work_id: u64,
    pub key: Vec<u8>,
    /// The key's value (the plugin's root); empty for signals on erased keys.
    pub values: Vec<ValueLoc>,
    pub detached: Option<ValueLoc>,
    pub request: Vec<u8>,
    pub new_root: bool,
    /// Relayed from a put or erase rather than invoked by a client.
    pub signal: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallbackRequest {
    /// Open `key`, creating it with `len` zero bytes if absent.
    CreateKey { key: Vec<u8>, len: u64 },
    OpenKey { key: Vec<u8> },
    EraseKey { key: Vec<u8> },
    ResizeValue { key: Vec<u8>, len: u64 },
    AllocateMemory { size: u64 },
    FreeMemory { offset: u64, size: u64 },
    /// Pairs written within `[t_begin, t_end]` (unix seconds, 0 = open).
    GetRefVector { t_begin: u32, t_end: u32 },
    /// Up to `max` pairs from ordinal `position` in key order.
    Iterate { position: u64, max: u32 },
    FindKey { expr: Vec<u8>, kind: MatchKind, begin: u64 },
    GetPoolInfo,
    Unlock { key: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefEntry {
    pub key: Vec<u8>,
    pub value: ValueLoc,
    pub time: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallbackResult {
    Done,
    Key { value: ValueLoc, created: bool },
    Offset(u64),
    Refs(Vec<RefEntry>),
    Page { entries: Vec<RefEntry>, next: Option<u64> },
    Found { key: Vec<u8>, next: u64 },
    PoolInfo { size: u64, free_bytes: u64, count: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShardToAdo {
    Bootstrap(Bootstrap),
    Work(WorkRequest),
    CallbackReply { work_id: u64, result: Result<CallbackResult, (Status, String)> },
    ClusterEvent { sender: String, kind: String, content: String },
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AdoToShard {
    Ready,
    /// Bootstrap failed (unknown plugin, bad mapping).
    Failed(String),
    Callback { work_id: u64, request: CallbackRequest },
    Complete { work_id: u64, plugin: u32, result: Result<Vec<Vec<u8>>, String> },
}

fn loc(e: &mut Enc, l: &ValueLoc) {
    e.u64(l.offset).u64(l.len);
}

fn dloc(d: &mut Dec) -> Result<ValueLoc, ProtocolError> {
    Ok(ValueLoc { offset: d.u64()?, len: d.u64()? })
}

fn refs(e: &mut Enc, v: &[RefEntry]) {
    e.u32(v.len() as u32);
    for r in v {
        e.key(&r.key);
        loc(e, &r.value);
        e.u32(r.time);
    }
}

fn drefs(d: &mut Dec) -> Result<Vec<RefEntry>, ProtocolError> {
    (0..d.u32()?).map(|_| Ok(RefEntry { key: d.key()?, value: dloc(d)?, time: d.u32()? })).collect()
}

fn kind(d: &mut Dec) -> Result<MatchKind, ProtocolError> {
    MatchKind::from_u8(d.u8()?).ok_or_else(|| ProtocolError("match kind".into()))
}

impl CallbackRequest {
    fn encode(&self, e: &mut Enc) {
        match self {
            CallbackRequest::CreateKey { key, len } => {
                e.u8(1).key(key).u64(*len);
            }
            CallbackRequest::OpenKey { key } => {
                e.u8(2).key(key);
            }
            CallbackRequest::EraseKey { key } => {
                e.u8(3).key(key);
            }
            CallbackRequest::ResizeValue { key, len } => {
                e.u8(4).key(key).u64(*len);
            }
            CallbackRequest::AllocateMemory { size } => {
                e.u8(5).u64(*size);
            }
            CallbackRequest::FreeMemory { offset, size } => {
                e.u8(6).u64(*offset).u64(*size);
            }
            CallbackRequest::GetRefVector { t_begin, t_end } => {
                e.u8(7).u32(*t_begin).u32(*t_end);
            }
            CallbackRequest::Iterate { position, max } => {
                e.u8(8).u64(*position).u32(*max);
            }
            CallbackRequest::FindKey { expr, kind, begin } => {
                e.u8(9).u8(*kind as u8).u64(*begin).value(expr);
            }
            CallbackRequest::GetPoolInfo => {
                e.u8(10);
            }
            CallbackRequest::Unlock { key } => {
                e.u8(11).key(key);
            }
        }
    }

    fn decode(d: &mut Dec) -> Result<Self, ProtocolError> {
        Ok(match d.u8()? {
            1 => CallbackRequest::CreateKey { key: d.key()?, len: d.u64()? },
            2 => CallbackRequest::OpenKey { key: d.key()? },
            3 => CallbackRequest::EraseKey { key: d.key()? },
            4 => CallbackRequest::ResizeValue { key: d.key()?, len: d.u64()? },
            5 => CallbackRequest::AllocateMemory { size: d.u64()? },
            6 => CallbackRequest::FreeMemory { offset: d.u64()?, size: d.u64()? },
            7 => CallbackRequest::GetRefVector { t_begin: d.u32()?, t_end: d.u32()? },
            8 => CallbackRequest::Iterate { position: d.u64()?, max: d.u32()? },
            9 => {
                let kind = kind(d)?;
                let begin = d.u64()?;
                CallbackRequest::FindKey { expr: d.value()?, kind, begin }
            }
            10 => CallbackRequest::GetPoolInfo,
            11 => CallbackRequest::Unlock { key: d.key()? },
            t => return perr(format!("callback kind {t}")),
        })
    }
}

impl CallbackResult {
    fn encode(&self, e: &mut Enc) {
        match self {
            CallbackResult::Done => {
                e.u8(0);
            }
            CallbackResult::Key { value, created } => {
                e.u8(1);
                loc(e, value);
                e.bool(*created);
            }
            CallbackResult::Offset(o) => {
                e.u8(2).u64(*o);
            }
            CallbackResult::Refs(v) => {
                e.u8(3);
                refs(e, v);
            }
            CallbackResult::Page { entries, next } => {
                e.u8(4);
                refs(e, entries);
                e.bool(next.is_some()).u64(next.unwrap_or(0));
            }
            CallbackResult::Found { key, next } => {
                e.u8(5).key(key).u64(*next);
            }
            CallbackResult::PoolInfo { size, free_bytes, count } => {
                e.u8(6).u64(*size).u64(*free_bytes).u64(*count);
            }
        }
    }

    fn decode(d: &mut Dec) -> Result<Self, ProtocolError> {
        Ok(match d.u8()? {
            0 => CallbackResult::Done,
            1 => CallbackResult::Key { value: dloc(d)?, created: d.bool()? },
            2 => CallbackResult::Offset(d.u64()?),
            3 => CallbackResult::Refs(drefs(d)?),
            4 => {
                let entries = drefs(d)?;
                let has = d.bool()?;
                let n = d.u64()?;
                CallbackResult::Page { entries, next: has.then_some(n) }
            }
            5 => CallbackResult::Found { key: d.key()?, next: d.u64()? },
            6 => CallbackResult::PoolInfo { size: d.u64()?, free_bytes: d.u64()?, count: d.u64()? },
            t => return perr(format!("callback result {t}")),
        })
    }
}

fn status(d: &mut Dec) -> Result<Status, ProtocolError> {
    let c = d.u16()?;
    Status::from_code(c).ok_or_else(|| ProtocolError(format!("status {c}")))
}

impl ShardToAdo {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        match self {
            ShardToAdo::Bootstrap(b) => {
                e.u8(1).u32(b.shard).u64(b.pool).u32(b.extents.len() as u32);
                for &(o, l) in &b.extents {
                    e.u64(o).u64(l);
                }
                e.bool(b.arena_path.is_some()).string(b.arena_path.as_deref().unwrap_or(""));
                e.u32(b.plugins.len() as u32);
                for p in &b.plugins {
                    e.string(p);
                }
                e.u32(b.params.len() as u32);
                for (k, v) in &b.params {
                    e.string(k).string(v);
                }
            }
            ShardToAdo::Work(w) => {
                e.u8(2).u64(w.work_id).key(&w.key).u32(w.values.len() as u32);
                for v in &w.values {
                    loc(&mut e, v);
                }
                e.bool(w.detached.is_some());
                loc(&mut e, &w.detached.unwrap_or(ValueLoc { offset: 0, len: 0 }));
                e.value(&w.request).bool(w.new_root).bool(w.signal);
            }
            ShardToAdo::CallbackReply { work_id, result } => {
                e.u8(3).u64(*work_id);
                match result {
                    Ok(r) => {
                        e.u16(Status::Ok as u16);
                        r.encode(&mut e);
                    }
                    Err((s, m)) => {
                        e.u16(*s as u16).string(m);
                    }
                }
            }
            ShardToAdo::ClusterEvent { sender, kind, content } => {
                e.u8(4).string(sender).string(kind).string(content);
            }
            ShardToAdo::Shutdown => {
                e.u8(5);
            }
        }
        e.into_vec()
    }

    pub fn decode(b: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = Dec::new(b);
        let m = match d.u8()? {
            1 => {
                let shard = d.u32()?;
                let pool = d.u64()?;
                let extents = (0..d.u32()?).map(|_| Ok((d.u64()?, d.u64()?))).collect::<Result<_, ProtocolError>>()?;
                let has = d.bool()?;
                let path = d.string()?;
                let plugins = (0..d.u32()?).map(|_| d.string()).collect::<Result<_, _>>()?;
                let params = (0..d.u32()?).map(|_| Ok((d.string()?, d.string()?))).collect::<Result<_, ProtocolError>>()?;
                ShardToAdo::Bootstrap(Bootstrap { shard, pool, extents, arena_path: has.then_some(path), plugins, params })
            }
            2 => {
                let work_id = d.u64()?;
                let key = d.key()?;
                let values = (0..d.u32()?).map(|_| dloc(&mut d)).collect::<Result<_, _>>()?;
                let has = d.bool()?;
                let det = dloc(&mut d)?;
                ShardToAdo::Work(WorkRequest {
                    work_id,
                    key,
                    values,
                    detached: has.then_some(det),
                    request: d.value()?,
                    new_root: d.bool()?,
                    signal: d.bool()?,
                })
            }
            3 => {
                let work_id = d.u64()?;
                let s = status(&mut d)?;
                let result = if s == Status::Ok { Ok(CallbackResult::decode(&mut d)?) } else { Err((s, d.string()?)) };
                ShardToAdo::CallbackReply { work_id, result }
            }
            4 => ShardToAdo::ClusterEvent { sender: d.string()?, kind: d.string()?, content: d.string()? },
            5 => ShardToAdo::Shutdown,
            t => return perr(format!("shard message {t}")),
        };
        d.finish()?;
        Ok(m)
    }
}

impl AdoToShard {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        match self {
            AdoToShard::Ready => {
                e.u8(1);
            }
            AdoToShard::Failed(m) => {
                e.u8(2).string(m);
            }
            AdoToShard::Callback { work_id, request } => {
                e.u8(3).u64(*work_id);
                request.encode(&mut e);
            }
            AdoToShard::Complete { work_id, plugin, result } => {
                e.u8(4).u64(*work_id).u32(*plugin);
                match result {
                    Ok(v) => {
                        e.bool(true).u32(v.len() as u32);
                        for r in v {
                            e.value(r);
                        }
                    }
                    Err(m) => {
                        e.bool(false).string(m);
                    }
                }
            }
        }
        e.into_vec()
    }

    pub fn decode(b: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = Dec::new(b);
        let m = match d.u8()? {
            1 => AdoToShard::Ready,
            2 => AdoToShard::Failed(d.string()?),
            3 => AdoToShard::Callback { work_id: d.u64()?, request: CallbackRequest::decode(&mut d)? },
            4 => {
                let work_id = d.u64()?;
                let plugin = d.u32()?;
                let result = if d.bool()? {
                    Ok((0..d.u32()?).map(|_| d.value()).collect::<Result<_, _>>()?)
                } else {
                    Err(d.string()?)
                };
                AdoToShard::Complete { work_id, plugin, result }
            }
            t => return perr(format!("ado message {t}")),
        };
        d.finish()?;
        Ok(m)
    }
}
