//! Crash-consistent programming toolkit: a bounded undo log and a heap with a
//! persistent root object whose metadata changes are themselves undo-logged.
//!
//! Usage follows the copy-off discipline: call [`UndoLog::record`] on a range
//! before mutating it, then [`UndoLog::commit`] once the transaction is done.
//! A crash (or [`UndoLog::rollback`]) rewinds every recorded range.
//!
//! Undo log layout at `base`:
//!
//! ```text
//! +0   armed u64        +8  entry count u64
//! +16  capacity u64     +24 bytes per entry u64
//! +64  capacity x (offset u64, length u64)
//! ...  capacity x saved-byte slots
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pmem::Pmem;

pub const DEFAULT_LOG_ENTRIES: u64 = 64;
pub const DEFAULT_LOG_SLOT: u64 = 4096;

#[derive(Debug)]
pub struct UndoLog {
    pmem: Pmem,
    base: u64,
    capacity: u64,
    slot: u64,
    bounds: Vec<(u64, u64)>,
    entries: Vec<(u64, u64)>,
    armed: bool,
}

impl UndoLog {
    pub fn footprint(capacity: u64, slot: u64) -> u64 {
        (64 + capacity * 16).next_multiple_of(64) + capacity * slot
    }

    fn slots_base(&self) -> u64 {
        self.base + (64 + self.capacity * 16).next_multiple_of(64)
    }

    /// Lay out an empty log at `base`. Records must fall inside `bounds`.
    pub fn format(pmem: Pmem, base: u64, capacity: u64, slot: u64, bounds: Vec<(u64, u64)>) -> Result<Self> {
        let mut hdr = [0u8; 32];
        hdr[16..24].copy_from_slice(&capacity.to_le_bytes());
        hdr[24..32].copy_from_slice(&slot.to_le_bytes());
        pmem.write_persist(base, &hdr)?;
        Ok(Self { pmem, base, capacity, slot, bounds, entries: Vec::new(), armed: false })
    }

    /// Open an existing log, rolling back any armed transaction.
    pub fn open(pmem: Pmem, base: u64, bounds: Vec<(u64, u64)>) -> Result<Self> {
        let capacity = pmem.read_u64(base + 16)?;
        let slot = pmem.read_u64(base + 24)?;
        if capacity == 0 || capacity > 1 << 16 || slot == 0 || slot > 1 << 20 {
            return Err(Error::Corrupt("undo log geometry".into()));
        }
        let mut log = Self { pmem, base, capacity, slot, bounds, entries: Vec::new(), armed: false };
        log.recover()?;
        Ok(log)
    }

    /// Apply a pending undo image, if armed. Idempotent.
    pub fn recover(&mut self) -> Result<bool> {
        let armed = self.pmem.read_u64(self.base)? != 0;
        if !armed {
            self.entries.clear();
            self.armed = false;
            return Ok(false);
        }
        let count = self.pmem.read_u64(self.base + 8)?.min(self.capacity);
        self.entries = (0..count)
            .map(|i| {
                let d = self.base + 64 + i * 16;
                Ok((self.pmem.read_u64(d)?, self.pmem.read_u64(d + 8)?))
            })
            .collect::<Result<_>>()?;
        self.armed = true;
        self.rollback()?;
        Ok(true)
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn in_bounds(&self, offset: u64, len: u64) -> bool {
        let Some(end) = offset.checked_add(len) else { return false };
        self.bounds.iter().any(|&(b, l)| offset >= b && end <= b + l)
    }

    /// Copy off `[offset, offset+len)` durably before the caller mutates it.
    pub fn record(&mut self, offset: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        if !self.in_bounds(offset, len) {
            return Err(Error::Range { offset, len });
        }
        if self.entries.iter().any(|&(o, l)| o <= offset && offset + len <= o + l) {
            return Ok(());
        }
        let needed = len.div_ceil(self.slot);
        if self.entries.len() as u64 + needed > self.capacity {
            return Err(Error::LogFull);
        }
        let mut o = offset;
        while o < offset + len {
            let n = self.slot.min(offset + len - o);
            let i = self.entries.len() as u64;
            let saved = self.pmem.read_vec(o, n)?;
            let slot_at = self.slots_base() + i * self.slot;
            self.pmem.write_persist(slot_at, &saved)?;
            let d = self.base + 64 + i * 16;
            self.pmem.write_u64(d, o)?;
            self.pmem.write_u64(d + 8, n)?;
            self.pmem.persist(d, 16)?;
            self.pmem.write_u64_persist(self.base + 8, i + 1)?;
            self.entries.push((o, n));
            o += n;
        }
        if !self.armed {
            self.pmem.write_u64_persist(self.base, 1)?;
            self.armed = true;
        }
        Ok(())
    }

    /// Persist every recorded range, then disarm.
    pub fn commit(&mut self) -> Result<()> {
        if !self.armed {
            self.entries.clear();
            return Ok(());
        }
        for &(o, l) in &self.entries {
            self.pmem.persist(o, l)?;
        }
        self.disarm()
    }

    /// Restore every recorded range (latest record first) and disarm.
    pub fn rollback(&mut self) -> Result<()> {
        if !self.armed {
            self.entries.clear();
            return Ok(());
        }
        for (i, &(o, l)) in self.entries.iter().enumerate().rev() {
            let saved = self.pmem.read_vec(self.slots_base() + i as u64 * self.slot, l)?;
            self.pmem.write_persist(o, &saved)?;
        }
        self.disarm()
    }

    fn disarm(&mut self) -> Result<()> {
        self.pmem.write_u64_persist(self.base, 0)?;
        self.pmem.write_u64_persist(self.base + 8, 0)?;
        self.entries.clear();
        self.armed = false;
        Ok(())
    }
}

const HEAP_MAGIC: u64 = u64::from_le_bytes(*b"CCHP\x01\0\0\0");
const HEAP_HDR: u64 = 4096;
const MAX_EXTENTS: u64 = 128;
const BLOCK_HDR: u64 = 16;
const MIN_BLOCK: u64 = 32;
const ALLOC_BIT: u64 = 1;

/// Crash-consistent heap: first-fit, address-ordered free list with
/// coalescing. Block headers are `(size | allocated, next_free)`.
///
/// `alloc`/`free`/`allocate_root` record their metadata changes in the
/// heap's undo log and join whatever transaction is open; nothing is
/// final until [`CcHeap::commit`].
#[derive(Debug)]
pub struct CcHeap {
    pmem: Pmem,
    base: u64,
    extents: Vec<(u64, u64)>,
    log: UndoLog,
    // volatile mirrors of the persistent block chain
    free: BTreeMap<u64, u64>,
    allocated: BTreeMap<u64, u64>,
    root: Option<u64>,
}

fn coalesce(regions: &[(u64, u64)]) -> Vec<(u64, u64)> {
    let mut v = regions.to_vec();
    v.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (o, l) in v {
        match out.last_mut() {
            Some(last) if last.0 + last.1 == o => last.1 += l,
            _ => out.push((o, l)),
        }
    }
    out
}

impl CcHeap {
    pub fn metadata_size() -> u64 {
        HEAP_HDR + UndoLog::footprint(DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT)
    }

    /// Format (`fresh`) or recover a heap over `regions`.
    pub fn open(pmem: Pmem, regions: &[(u64, u64)], fresh: bool) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Invalid("heap needs at least one region".into()));
        }
        let extents = coalesce(regions);
        if extents.len() as u64 > MAX_EXTENTS {
            return Err(Error::Invalid("too many heap regions".into()));
        }
        let base = extents[0].0;
        let log_base = base + HEAP_HDR;
        let first_block = (log_base + UndoLog::footprint(DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT)).next_multiple_of(64);
        if first_block + MIN_BLOCK > extents[0].0 + extents[0].1 {
            return Err(Error::Invalid("first heap region too small".into()));
        }
        if fresh {
            Self::format(pmem, extents, first_block)
        } else {
            let magic = pmem.read_u64(base)?;
            if magic != HEAP_MAGIC {
                return Err(Error::Corrupt("heap magic".into()));
            }
            let n = pmem.read_u64(base + 24)?;
            let stored: Vec<(u64, u64)> = (0..n.min(MAX_EXTENTS))
                .map(|i| Ok((pmem.read_u64(base + 64 + i * 16)?, pmem.read_u64(base + 72 + i * 16)?)))
                .collect::<Result<_>>()?;
            if stored != extents {
                return Err(Error::Corrupt("heap region list differs from the one supplied".into()));
            }
            let log = UndoLog::open(pmem.clone(), log_base, extents.clone())?;
            let mut heap = Self {
                pmem,
                base,
                extents,
                log,
                free: BTreeMap::new(),
                allocated: BTreeMap::new(),
                root: None,
            };
            heap.reload()?;
            Ok(heap)
        }
    }

    fn format(pmem: Pmem, extents: Vec<(u64, u64)>, first_block: u64) -> Result<Self> {
        let base = extents[0].0;
        let log = UndoLog::format(pmem.clone(), base + HEAP_HDR, DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT, extents.clone())?;
        let spans = Self::block_spans(&extents, first_block);
        for (i, &(start, end)) in spans.iter().enumerate() {
            let next = spans.get(i + 1).map_or(0, |s| s.0);
            pmem.write_u64(start, end - start)?;
            pmem.write_u64(start + 8, next)?;
            pmem.persist(start, BLOCK_HDR)?;
        }
        let mut hdr = vec![0u8; 64 + extents.len() * 16];
        hdr[16..24].copy_from_slice(&spans[0].0.to_le_bytes());
        hdr[24..32].copy_from_slice(&(extents.len() as u64).to_le_bytes());
        hdr[32..40].copy_from_slice(&(base + HEAP_HDR).to_le_bytes());
        for (i, (o, l)) in extents.iter().enumerate() {
            hdr[64 + i * 16..72 + i * 16].copy_from_slice(&o.to_le_bytes());
            hdr[72 + i * 16..80 + i * 16].copy_from_slice(&l.to_le_bytes());
        }
        pmem.write_persist(base, &hdr)?;
        pmem.write_u64_persist(base, HEAP_MAGIC)?;
        let free = spans.iter().map(|&(s, e)| (s, e - s)).collect();
        Ok(Self { pmem, base, extents, log, free, allocated: BTreeMap::new(), root: None })
    }

    fn block_spans(extents: &[(u64, u64)], first_block: u64) -> Vec<(u64, u64)> {
        extents
            .iter()
            .enumerate()
            .map(|(i, &(o, l))| {
                let start = if i == 0 { first_block } else { o.next_multiple_of(16) };
                (start, (o + l) & !15)
            })
            .filter(|(s, e)| e > s && e - s >= MIN_BLOCK)
            .collect()
    }

    fn first_block(&self) -> u64 {
        (self.base + HEAP_HDR + UndoLog::footprint(DEFAULT_LOG_ENTRIES, DEFAULT_LOG_SLOT)).next_multiple_of(64)
    }

    /// Rebuild the volatile mirrors by walking the block chain and checking
    /// it against the persistent free list.
    fn reload(&mut self) -> Result<()> {
        self.free.clear();
        self.allocated.clear();
        for (start, end) in Self::block_spans(&self.extents, self.first_block()) {
            let mut b = start;
            while b < end {
                let w = self.pmem.read_u64(b)?;
                let size = w & !15;
                if size < MIN_BLOCK || b + size > end {
                    return Err(Error::Corrupt(format!("heap block at {b:#x} has size {size}")));
                }
                if w & ALLOC_BIT != 0 {
                    self.allocated.insert(b, size);
                } else {
                    self.free.insert(b, size);
                }
                b += size;
            }
        }
        let mut cur = self.pmem.read_u64(self.base + 16)?;
        let mut listed = 0usize;
        while cur != 0 {
            if !self.free.contains_key(&cur) || listed > self.free.len() {
                return Err(Error::Corrupt(format!("free list entry {cur:#x} is not a free block")));
            }
            listed += 1;
            cur = self.pmem.read_u64(cur + 8)?;
        }
        if listed != self.free.len() {
            return Err(Error::Corrupt("free list does not cover all free blocks".into()));
        }
        let root = self.pmem.read_u64(self.base + 8)?;
        self.root = (root != 0).then_some(root);
        Ok(())
    }

    pub fn pmem(&self) -> &Pmem {
        &self.pmem
    }

    pub fn extents(&self) -> &[(u64, u64)] {
        &self.extents
    }

    pub fn log_mut(&mut self) -> &mut UndoLog {
        &mut self.log
    }

    pub fn record(&mut self, offset: u64, len: u64) -> Result<()> {
        self.log.record(offset, len)
    }

    pub fn commit(&mut self) -> Result<()> {
        self.log.commit()
    }

    /// Roll the open transaction back, including allocator metadata.
    pub fn rollback(&mut self) -> Result<()> {
        self.log.rollback()?;
        self.reload()
    }

    fn set_link(&mut self, pred: Option<u64>, target: u64) -> Result<()> {
        let at = match pred {
            Some(p) => p + 8,
            None => self.base + 16,
        };
        self.log.record(at, 8)?;
        self.pmem.write_u64(at, target)
    }

    fn write_header(&mut self, b: u64, size_word: u64, next: u64) -> Result<()> {
        self.log.record(b, BLOCK_HDR)?;
        self.pmem.write_u64(b, size_word)?;
        self.pmem.write_u64(b + 8, next)
    }

    /// First-fit allocation of at least `size` bytes; returns the payload offset.
    pub fn alloc(&mut self, size: u64) -> Result<u64> {
        if size == 0 {
            return Err(Error::Invalid("allocation of zero bytes".into()));
        }
        let need = (size + BLOCK_HDR).next_multiple_of(16).max(MIN_BLOCK);
        let (b, s) = self.free.iter().find(|(_, &s)| s >= need).map(|(&b, &s)| (b, s)).ok_or(Error::NoSpace)?;
        let pred = self.free.range(..b).next_back().map(|(&p, _)| p);
        let next = self.free.range(b + 1..).next().map_or(0, |(&n, _)| n);
        if s - need >= MIN_BLOCK {
            let rest = b + need;
            self.write_header(rest, s - need, next)?;
            self.write_header(b, need | ALLOC_BIT, 0)?;
            self.set_link(pred, rest)?;
            self.free.remove(&b);
            self.free.insert(rest, s - need);
            self.allocated.insert(b, need);
        } else {
            self.write_header(b, s | ALLOC_BIT, 0)?;
            self.set_link(pred, next)?;
            self.free.remove(&b);
            self.allocated.insert(b, s);
        }
        Ok(b + BLOCK_HDR)
    }

    /// Free a payload offset returned by [`CcHeap::alloc`], coalescing with
    /// free neighbours.
    pub fn free(&mut self, offset: u64) -> Result<()> {
        let b = offset.checked_sub(BLOCK_HDR).ok_or(Error::BadFree(offset))?;
        let s = *self.allocated.get(&b).ok_or(Error::BadFree(offset))?;
        let prev = self.free.range(..b).next_back().map(|(&p, &ps)| (p, ps));
        let next = self.free.range(b..).next().map(|(&n, &ns)| (n, ns));
        let merge_prev = prev.filter(|&(p, ps)| p + ps == b);
        let merge_next = next.filter(|&(n, _)| b + s == n);
        self.allocated.remove(&b);
        match (merge_prev, merge_next) {
            (Some((p, ps)), Some((n, ns))) => {
                let after = self.free.range(n + 1..).next().map_or(0, |(&a, _)| a);
                self.write_header(p, ps + s + ns, after)?;
                self.free.remove(&n);
                self.free.insert(p, ps + s + ns);
            }
            (Some((p, ps)), None) => {
                let after = next.map_or(0, |(n, _)| n);
                self.write_header(p, ps + s, after)?;
                self.free.insert(p, ps + s);
            }
            (None, Some((n, ns))) => {
                let after = self.free.range(n + 1..).next().map_or(0, |(&a, _)| a);
                self.write_header(b, s + ns, after)?;
                self.set_link(prev.map(|(p, _)| p), b)?;
                self.free.remove(&n);
                self.free.insert(b, s + ns);
            }
            (None, None) => {
                let after = next.map_or(0, |(n, _)| n);
                self.write_header(b, s, after)?;
                self.set_link(prev.map(|(p, _)| p), b)?;
                self.free.insert(b, s);
            }
        }
        Ok(())
    }

    /// Usable bytes of the block holding `offset`.
    pub fn usable_size(&self, offset: u64) -> Option<u64> {
        self.allocated.get(&(offset.wrapping_sub(BLOCK_HDR))).map(|s| s - BLOCK_HDR)
    }

    /// Allocate the root object and record it in the heap header.
    pub fn allocate_root(&mut self, size: u64) -> Result<u64> {
        let off = self.alloc(size)?;
        self.log.record(self.base + 8, 8)?;
        self.pmem.write_u64(self.base + 8, off)?;
        self.root = Some(off);
        Ok(off)
    }

    pub fn root(&self) -> Option<u64> {
        // the header word is authoritative; the cache may lag a rollback
        self.pmem.read_u64(self.base + 8).ok().filter(|&r| r != 0).or(self.root)
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    pub fn allocated_bytes(&self) -> u64 {
        self.allocated.values().sum()
    }

    pub fn allocation_count(&self) -> usize {
        self.allocated.len()
    }

    /// Payload ranges currently allocated.
    pub fn allocations(&self) -> Vec<(u64, u64)> {
        self.allocated.iter().map(|(&b, &s)| (b + BLOCK_HDR, s - BLOCK_HDR)).collect()
    }
}
