//! Primary-index storage engines behind one interface.
//!
//! * `hstore`: persistent hopscotch table; payloads come from a volatile
//!   allocator rebuilt from the table on restart.
//! * `hstore-cc`: the same table over the crash-consistent heap, so a
//!   restart only replays the heap's undo log.
//! * `mapstore`: volatile ordered map; empty after restart.
//!
//! All value bytes live in pool memory (inline values inside their hash
//! entry), so a [`ValueLoc`] can be handed to plugins as a window onto the
//! pool.

use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hash::{AvalancheHasher, KeyHasher};
use crate::pmem::Pmem;

pub mod entry;
pub mod hstore;
pub mod mapstore;
pub mod pool;
pub mod space;
pub mod table;

/// Largest value any engine stores.
pub const MAX_VALUE: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EngineKind {
    HStore,
    HStoreCc,
    MapStore,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::HStore, EngineKind::HStoreCc, EngineKind::MapStore];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::HStore => "hstore",
            EngineKind::HStoreCc => "hstore-cc",
            EngineKind::MapStore => "mapstore",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            EngineKind::HStore => 0,
            EngineKind::HStoreCc => 1,
            EngineKind::MapStore => 2,
        }
    }

    pub fn from_code(c: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == c)
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown backend {s:?}")))
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Absolute arena range holding a value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueLoc {
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub value_len: u64,
    /// Unix seconds of the last put or resize.
    pub write_time: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolInfo {
    pub size: u64,
    pub free_bytes: u64,
    pub count: u64,
}

#[derive(Clone)]
pub struct EngineOptions {
    pub base_size: u64,
    pub hasher: Arc<dyn KeyHasher>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { base_size: 1024, hasher: Arc::new(AvalancheHasher::default()) }
    }
}

impl std::fmt::Debug for EngineOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineOptions").field("base_size", &self.base_size).finish()
    }
}

pub trait KvEngine: Send + std::fmt::Debug {
    fn kind(&self) -> EngineKind;
    fn pmem(&self) -> &Pmem;

    fn put(&mut self, key: &[u8], value: &[u8], no_overwrite: bool) -> Result<()>;
    fn get(&self, key: &[u8]) -> Result<Vec<u8>>;
    fn erase(&mut self, key: &[u8]) -> Result<()>;
    fn locate(&self, key: &[u8]) -> Result<ValueLoc>;

    /// Open `key`, creating it with a zeroed value of `len` bytes if absent.
    /// The value is placed out of line, so its location stays put while
    /// other keys are inserted. Returns whether the key was created.
    fn create_key(&mut self, key: &[u8], len: u64) -> Result<(ValueLoc, bool)>;

    /// Reallocate the value, keeping the common prefix and zero-filling
    /// any growth. The new value is out of line.
    fn resize_value(&mut self, key: &[u8], len: u64) -> Result<ValueLoc>;

    /// Location that stays valid until the key is resized or erased
    /// (moves an inline value out of line).
    fn locate_stable(&mut self, key: &[u8]) -> Result<ValueLoc>;

    fn read_range(&self, key: &[u8], offset: u64, len: u64) -> Result<Vec<u8>> {
        let loc = self.locate(key)?;
        check_range(loc, offset, len)?;
        self.pmem().read_vec(loc.offset + offset, len)
    }

    /// Overwrite part of a value and persist it. Not undo-logged: a crash
    /// during the write can leave part of the range written.
    fn write_range(&mut self, key: &[u8], offset: u64, data: &[u8]) -> Result<()> {
        let loc = self.locate(key)?;
        check_range(loc, offset, data.len() as u64)?;
        self.pmem().write_persist(loc.offset + offset, data)
    }

    fn allocate_memory(&mut self, size: u64) -> Result<u64>;
    fn free_memory(&mut self, offset: u64, size: u64) -> Result<()>;

    /// Every pair as (key, value location, write time), in no set order.
    fn iterate(&self) -> Result<Vec<(Vec<u8>, ValueLoc, u32)>>;
    fn count(&self) -> u64;
    fn attributes(&self, key: &[u8]) -> Result<Attributes>;
    fn pool_info(&self) -> PoolInfo;

    /// Pool extents (absolute arena ranges) this engine may touch.
    fn extents(&self) -> &[(u64, u64)];

    /// Structural self-check (hopscotch invariants for the hash engines).
    fn audit(&self) -> std::result::Result<(), String> {
        Ok(())
    }

    /// Buckets in the primary hash table, if there is one.
    fn buckets(&self) -> Option<u64> {
        None
    }
}

pub(crate) fn check_range(loc: ValueLoc, offset: u64, len: u64) -> Result<()> {
    match offset.checked_add(len) {
        Some(end) if end <= loc.len => Ok(()),
        _ => Err(Error::Range { offset, len }),
    }
}

pub(crate) fn now_secs() -> u32 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as u32)
        .unwrap_or(0)
}

/// Format engine structures over fresh pool extents. The pool header page
/// (first [`pool::POOL_HEADER`] bytes of the first extent) is reserved.
pub fn create_engine(kind: EngineKind, pmem: Pmem, extents: &[(u64, u64)], opts: &EngineOptions) -> Result<Box<dyn KvEngine>> {
    Ok(match kind {
        EngineKind::HStore => Box::new(hstore::HStore::create_volatile(pmem, extents, opts)?),
        EngineKind::HStoreCc => Box::new(hstore::HStore::create_cc(pmem, extents, opts)?),
        EngineKind::MapStore => Box::new(mapstore::MapStore::new(pmem, extents)),
    })
}

/// Recover an engine after restart.
pub fn open_engine(kind: EngineKind, pmem: Pmem, extents: &[(u64, u64)], opts: &EngineOptions) -> Result<Box<dyn KvEngine>> {
    Ok(match kind {
        EngineKind::HStore => Box::new(hstore::HStore::open_volatile(pmem, extents, opts)?),
        EngineKind::HStoreCc => Box::new(hstore::HStore::open_cc(pmem, extents, opts)?),
        EngineKind::MapStore => Box::new(mapstore::MapStore::new(pmem, extents)),
    })
}
