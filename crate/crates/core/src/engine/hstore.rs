//! Hash-table engines: `hstore` (volatile allocator, reconstituted on
//! restart) and `hstore-cc` (crash-consistent heap).
//!
//! `hstore` keeps its undo log right after the pool header and records
//! every block handed out by `allocate_memory` in a second hash table (the
//! ledger, keyed by offset) so that reconstitution sees plugin-owned memory
//! too. `hstore-cc` keeps its table root in the heap's root object and needs
//! no ledger.

use std::sync::Arc;

use super::entry::{Field, HashEntry, COMMITTED, INLINE_MAX};
use super::pool::{KV_ROOT, LEDGER_ROOT, POOL_HEADER};
use super::space::{atomically, CcSpace, Space, VolatileSpace};
use super::table::{Table, ROOT_SIZE};
use super::{now_secs, Attributes, EngineKind, EngineOptions, KvEngine, PoolInfo, ValueLoc, MAX_VALUE};
use crate::cc_heap::{CcHeap, UndoLog, DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT};
use crate::error::{Error, Result};
use crate::hash::KeyHasher;
use crate::pmem::Pmem;
use crate::recon_alloc::ReconAllocator;

const LEDGER_BASE: u64 = 64;

#[derive(Debug)]
pub struct HStore<S: Space> {
    kind: EngineKind,
    space: S,
    kv: Table,
    ledger: Option<Table>,
    extents: Vec<(u64, u64)>,
}

fn check_extents(extents: &[(u64, u64)]) -> Result<()> {
    match extents.first() {
        Some(&(_, l)) if l > POOL_HEADER + (1 << 20) => Ok(()),
        _ => Err(Error::Invalid("pool extents too small".into())),
    }
}

fn volatile_layout(extents: &[(u64, u64)]) -> (u64, Vec<(u64, u64)>) {
    let (base, len) = extents[0];
    let log = base + POOL_HEADER;
    let heap = (log + UndoLog::footprint(DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT)).next_multiple_of(4096);
    let mut heap_ext = vec![(heap, base + len - heap)];
    heap_ext.extend_from_slice(&extents[1..]);
    (log, heap_ext)
}

fn cc_regions(extents: &[(u64, u64)]) -> Vec<(u64, u64)> {
    let mut v = vec![(extents[0].0 + POOL_HEADER, extents[0].1 - POOL_HEADER)];
    v.extend_from_slice(&extents[1..]);
    v
}

impl HStore<VolatileSpace> {
    pub fn create_volatile(pmem: Pmem, extents: &[(u64, u64)], opts: &EngineOptions) -> Result<Self> {
        check_extents(extents)?;
        let (log_base, heap_ext) = volatile_layout(extents);
        let log = UndoLog::format(pmem.clone(), log_base, DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT, extents.to_vec())?;
        let mut space = VolatileSpace::new(pmem, log, ReconAllocator::new(&heap_ext));
        let base = extents[0].0;
        let kv = Table::create(&mut space, base + KV_ROOT, opts.base_size, opts.hasher.clone())?;
        let ledger = Table::create(&mut space, base + LEDGER_ROOT, LEDGER_BASE, opts.hasher.clone())?;
        Ok(Self { kind: EngineKind::HStore, space, kv, ledger: Some(ledger), extents: extents.to_vec() })
    }

    /// Replay the undo log, reload both tables and reconstitute the
    /// allocator from the segments, payloads and ledger records.
    pub fn open_volatile(pmem: Pmem, extents: &[(u64, u64)], opts: &EngineOptions) -> Result<Self> {
        check_extents(extents)?;
        let (log_base, heap_ext) = volatile_layout(extents);
        let log = UndoLog::open(pmem.clone(), log_base, extents.to_vec())?;
        let base = extents[0].0;
        let mut kv = Table::open(&pmem, base + KV_ROOT, opts.hasher.clone())?;
        let mut ledger = Table::open(&pmem, base + LEDGER_ROOT, opts.hasher.clone())?;
        let mut live = kv.live_objects(&pmem)?;
        live.extend(ledger.live_objects(&pmem)?);
        for (_, e) in ledger.committed(&pmem)? {
            live.push(ledger_record(&pmem, &e)?);
        }
        let alloc = ReconAllocator::reconstitute(&heap_ext, &live)?;
        let mut space = VolatileSpace::new(pmem, log, alloc);
        if kv.is_expanding() {
            kv.rebuild(&mut space)?;
        }
        if ledger.is_expanding() {
            ledger.rebuild(&mut space)?;
        }
        Ok(Self { kind: EngineKind::HStore, space, kv, ledger: Some(ledger), extents: extents.to_vec() })
    }

    pub fn allocator(&self) -> &ReconAllocator {
        self.space.allocator()
    }
}

fn ledger_record(pm: &Pmem, e: &HashEntry) -> Result<(u64, u64)> {
    let k = Table::key_of(pm, e)?;
    let v = Table::field_bytes(pm, &e.value_field())?;
    match (<[u8; 8]>::try_from(k.as_slice()), <[u8; 8]>::try_from(v.as_slice())) {
        (Ok(k), Ok(v)) => Ok((u64::from_le_bytes(k), u64::from_le_bytes(v))),
        _ => Err(Error::Corrupt("ledger entry".into())),
    }
}

impl HStore<CcSpace> {
    pub fn create_cc(pmem: Pmem, extents: &[(u64, u64)], opts: &EngineOptions) -> Result<Self> {
        check_extents(extents)?;
        let heap = CcHeap::open(pmem, &cc_regions(extents), true)?;
        let mut space = CcSpace::new(heap);
        // root allocation joins the table-creation transaction
        let root = space.heap_mut().allocate_root(ROOT_SIZE)?;
        let kv = Table::create(&mut space, root, opts.base_size, opts.hasher.clone())?;
        Ok(Self { kind: EngineKind::HStoreCc, space, kv, ledger: None, extents: extents.to_vec() })
    }

    pub fn open_cc(pmem: Pmem, extents: &[(u64, u64)], opts: &EngineOptions) -> Result<Self> {
        check_extents(extents)?;
        let heap = CcHeap::open(pmem.clone(), &cc_regions(extents), false)?;
        let root = heap.root().ok_or_else(|| Error::Corrupt("heap has no root".into()))?;
        let mut space = CcSpace::new(heap);
        let mut kv = Table::open(&pmem, root, opts.hasher.clone())?;
        if kv.is_expanding() {
            kv.rebuild(&mut space)?;
        }
        Ok(Self { kind: EngineKind::HStoreCc, space, kv, ledger: None, extents: extents.to_vec() })
    }

    pub fn heap(&self) -> &CcHeap {
        self.space.heap()
    }
}

/// Place bytes inline when small enough, else in a fresh persisted block.
fn store<S: Space + ?Sized>(sp: &mut S, bytes: &[u8], allow_inline: bool) -> Result<Field> {
    if bytes.is_empty() || (allow_inline && bytes.len() <= INLINE_MAX) {
        return Ok(Field::Inline(bytes.to_vec()));
    }
    let off = sp.alloc(bytes.len() as u64)?;
    sp.pmem().write_persist(off, bytes)?;
    Ok(Field::Remote { offset: off, len: bytes.len() as u64 })
}

fn release<S: Space + ?Sized>(sp: &mut S, f: &Field) -> Result<()> {
    match *f {
        Field::Remote { offset, len } => sp.free(offset, len),
        Field::Inline(_) => Ok(()),
    }
}

impl<S: Space> HStore<S> {
    pub fn table(&self) -> &Table {
        &self.kv
    }

    pub fn space(&self) -> &S {
        &self.space
    }

    fn lookup(&self, key: &[u8]) -> Result<(u64, HashEntry)> {
        self.kv.find(self.space.pmem(), key)?.ok_or(Error::KeyNotFound)
    }

    fn insert_new(&mut self, key: &[u8], value: Option<&[u8]>, zeroed: u64) -> Result<u64> {
        let hash = self.kv.hash(key);
        let time = now_secs();
        self.kv.insert(&mut self.space, hash, |sp| {
            let kf = store(sp, key, true)?;
            let vf = match value {
                Some(v) => store(sp, v, true)?,
                None if zeroed == 0 => Field::Inline(Vec::new()),
                None => {
                    let off = sp.alloc(zeroed)?;
                    sp.pmem().zero(off, zeroed)?;
                    sp.pmem().persist(off, zeroed)?;
                    Field::Remote { offset: off, len: zeroed }
                }
            };
            Ok(HashEntry::new(&kf, &vf, COMMITTED, time))
        })
    }

    fn replace_value(&mut self, slot: u64, old: HashEntry, make: impl FnOnce(&mut S) -> Result<Field>) -> Result<()> {
        let kv = &self.kv;
        atomically(&mut self.space, |sp| {
            let vf = make(sp)?;
            let mut e = old;
            e.set_value(&vf);
            e.set_time(now_secs());
            kv.update(sp, slot, &e)?;
            release(sp, &old.value_field())
        })
    }

    fn ledger_find(&self, offset: u64) -> Result<Option<(u64, HashEntry)>> {
        match &self.ledger {
            Some(l) => l.find(self.space.pmem(), &offset.to_le_bytes()),
            None => Ok(None),
        }
    }

    pub fn hop_word(&self, bucket: u64) -> Result<u64> {
        self.kv.hop(self.space.pmem(), bucket)
    }

    pub fn slot_of(&self, key: &[u8]) -> Result<Option<u64>> {
        Ok(self.kv.find(self.space.pmem(), key)?.map(|(g, _)| g))
    }
}

impl<S: Space> KvEngine for HStore<S> {
    fn kind(&self) -> EngineKind {
        self.kind
    }

    fn pmem(&self) -> &Pmem {
        self.space.pmem()
    }

    fn put(&mut self, key: &[u8], value: &[u8], no_overwrite: bool) -> Result<()> {
        if key.is_empty() {
            return Err(Error::Invalid("empty key".into()));
        }
        if value.len() as u64 > MAX_VALUE {
            return Err(Error::TooLarge);
        }
        match self.kv.find(self.space.pmem(), key)? {
            Some(_) if no_overwrite => Err(Error::AlreadyExists),
            Some((slot, e)) => self.replace_value(slot, e, |sp| store(sp, value, true)),
            None => self.insert_new(key, Some(value), 0).map(|_| ()),
        }
    }

    fn get(&self, key: &[u8]) -> Result<Vec<u8>> {
        let (_, e) = self.lookup(key)?;
        Table::field_bytes(self.space.pmem(), &e.value_field())
    }

    fn erase(&mut self, key: &[u8]) -> Result<()> {
        let (slot, e) = self.lookup(key)?;
        self.kv.remove(&mut self.space, slot, |sp| {
            release(sp, &e.key_field())?;
            release(sp, &e.value_field())
        })
    }

    fn locate(&self, key: &[u8]) -> Result<ValueLoc> {
        let (slot, e) = self.lookup(key)?;
        Ok(self.kv.value_loc(slot, &e))
    }

    fn locate_stable(&mut self, key: &[u8]) -> Result<ValueLoc> {
        let (_, e) = self.lookup(key)?;
        match e.value_field() {
            Field::Inline(b) if !b.is_empty() => self.resize_value(key, b.len() as u64),
            _ => self.locate(key),
        }
    }

    fn create_key(&mut self, key: &[u8], len: u64) -> Result<(ValueLoc, bool)> {
        if key.is_empty() {
            return Err(Error::Invalid("empty key".into()));
        }
        if len > MAX_VALUE {
            return Err(Error::TooLarge);
        }
        if let Some((slot, e)) = self.kv.find(self.space.pmem(), key)? {
            return Ok((self.kv.value_loc(slot, &e), false));
        }
        let slot = self.insert_new(key, None, len)?;
        let e = self.kv.read(self.space.pmem(), slot)?;
        Ok((self.kv.value_loc(slot, &e), true))
    }

    fn resize_value(&mut self, key: &[u8], len: u64) -> Result<ValueLoc> {
        if len > MAX_VALUE {
            return Err(Error::TooLarge);
        }
        let (slot, e) = self.lookup(key)?;
        let old = Table::field_bytes(self.space.pmem(), &e.value_field())?;
        self.replace_value(slot, e, |sp| {
            if len == 0 {
                return Ok(Field::Inline(Vec::new()));
            }
            let off = sp.alloc(len)?;
            let keep = old.len().min(len as usize);
            let pm = sp.pmem().clone();
            pm.write(off, &old[..keep])?;
            pm.zero(off + keep as u64, len - keep as u64)?;
            pm.persist(off, len)?;
            Ok(Field::Remote { offset: off, len })
        })?;
        self.locate(key)
    }

    fn allocate_memory(&mut self, size: u64) -> Result<u64> {
        if size == 0 || size > MAX_VALUE {
            return Err(Error::Invalid(format!("allocation of {size} bytes")));
        }
        let off = self.space.alloc(size)?;
        self.space.commit()?;
        let Some(ledger) = self.ledger.as_mut() else { return Ok(off) };
        let key = off.to_le_bytes();
        let hash = ledger.hash(&key);
        let rec = HashEntry::new(&Field::Inline(key.to_vec()), &Field::Inline(size.to_le_bytes().to_vec()), COMMITTED, now_secs());
        match ledger.insert(&mut self.space, hash, |_| Ok(rec)) {
            Ok(_) => Ok(off),
            Err(e) => {
                self.space.free(off, size)?;
                self.space.commit()?;
                Err(e)
            }
        }
    }

    fn free_memory(&mut self, offset: u64, size: u64) -> Result<()> {
        if self.ledger.is_none() {
            return atomically(&mut self.space, |sp| sp.free(offset, size));
        }
        let (slot, e) = self.ledger_find(offset)?.ok_or(Error::BadFree(offset))?;
        let (_, recorded) = ledger_record(self.space.pmem(), &e)?;
        let ledger = self.ledger.as_mut().expect("ledger");
        ledger.remove(&mut self.space, slot, |sp| sp.free(offset, recorded))
    }

    fn iterate(&self) -> Result<Vec<(Vec<u8>, ValueLoc, u32)>> {
        let pm = self.space.pmem();
        self.kv
            .committed(pm)?
            .into_iter()
            .map(|(g, e)| Ok((Table::key_of(pm, &e)?, self.kv.value_loc(g, &e), e.time())))
            .collect()
    }

    fn count(&self) -> u64 {
        self.kv.count()
    }

    fn attributes(&self, key: &[u8]) -> Result<Attributes> {
        let (_, e) = self.lookup(key)?;
        Ok(Attributes { value_len: e.value_field().len(), write_time: e.time() })
    }

    fn pool_info(&self) -> PoolInfo {
        PoolInfo {
            size: self.extents.iter().map(|e| e.1).sum(),
            free_bytes: self.space.free_bytes(),
            count: self.kv.count(),
        }
    }

    fn extents(&self) -> &[(u64, u64)] {
        &self.extents
    }

    fn audit(&self) -> std::result::Result<(), String> {
        self.kv.audit(self.space.pmem())?;
        if let Some(l) = &self.ledger {
            l.audit(self.space.pmem()).map_err(|e| format!("ledger: {e}"))?;
        }
        Ok(())
    }

    fn buckets(&self) -> Option<u64> {
        Some(self.kv.total())
    }
}

/// Test helper: a hasher that returns pinned values for chosen keys.
#[derive(Default)]
pub struct PinnedHasher {
    pub pins: std::collections::HashMap<Vec<u8>, u64>,
    pub fallback: crate::hash::AvalancheHasher,
}

impl KeyHasher for PinnedHasher {
    fn hash(&self, key: &[u8]) -> u64 {
        self.pins.get(key).copied().unwrap_or_else(|| self.fallback.hash(key))
    }
}

impl PinnedHasher {
    pub fn new(pins: impl IntoIterator<Item = (Vec<u8>, u64)>) -> Arc<Self> {
        Arc::new(Self { pins: pins.into_iter().collect(), fallback: Default::default() })
    }
}
