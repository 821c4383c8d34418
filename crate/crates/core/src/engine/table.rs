//! Persistent hopscotch hash table made of doubling segments.
//!
//! Segment 0 holds `base` buckets, segment k >= 1 holds `base << (k-1)`, so
//! with s segments the table has `base << (s-1)` buckets and a hash maps to
//! global bucket `hash mod total`. Neighbourhoods wrap modulo the total.
//!
//! Table root (64 bytes): magic, base size, segment count, first segment,
//! expanding marker. Segment header (64 bytes): magic, index, bucket
//! count, next segment.
//!
//! Every mutation runs inside a [`Space`] transaction. Displacement moves
//! commit one at a time. Growing the table commits the new segment link
//! together with the expanding marker, then a rebuild pass recomputes the
//! hop words (unlogged; it is rerun from scratch if interrupted) and moves
//! entries that left their neighbourhood, each move being its own
//! transaction.

use std::sync::Arc;

use super::entry::{Field, HashEntry, COMMITTED, ENTRY_SIZE, FREE, HOP_BITS, HOP_MASK, VALUE_FIELD};
use super::space::{atomically, Space};
use super::ValueLoc;
use crate::error::{Error, Result};
use crate::hash::KeyHasher;
use crate::pmem::Pmem;

pub const ROOT_SIZE: u64 = 64;
const SEG_HDR: u64 = 64;
const SEG_MAGIC: u64 = u64::from_le_bytes(*b"HSEG\0\0\0\0");
const TABLE_MAGIC: u64 = u64::from_le_bytes(*b"HTBL\0\0\0\0");
const R_BASE: u64 = 8;
const R_COUNT: u64 = 16;
const R_FIRST: u64 = 24;
const R_EXPANDING: u64 = 32;
const S_NEXT: u64 = 24;
const MAX_SEGMENTS: usize = 40;
const MAX_GROWTH_PER_INSERT: usize = 4;

pub fn segment_buckets(base: u64, k: usize) -> u64 {
    if k == 0 {
        base
    } else {
        base << (k - 1)
    }
}

pub fn total_buckets(base: u64, segments: usize) -> u64 {
    base << (segments - 1)
}

fn split_global(g: u64, base: u64) -> (usize, u64) {
    if g < base {
        (0, g)
    } else {
        let top = 63 - g.leading_zeros();
        ((top - base.trailing_zeros() + 1) as usize, g - (1 << top))
    }
}

/// Segment index and in-segment offset for a hash.
pub fn bucket_of(hash: u64, base: u64, segments: usize) -> (usize, u64) {
    split_global(hash & (total_buckets(base, segments) - 1), base)
}

pub struct Table {
    root: u64,
    base: u64,
    segs: Vec<u64>,
    hasher: Arc<dyn KeyHasher>,
    count: u64,
    expanding: bool,
}

impl std::fmt::Debug for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Table").field("root", &self.root).field("segs", &self.segs).field("count", &self.count).finish()
    }
}

fn new_segment<S: Space + ?Sized>(sp: &mut S, index: usize, buckets: u64) -> Result<u64> {
    let len = SEG_HDR + buckets * ENTRY_SIZE;
    let seg = sp.alloc(len)?;
    let pm = sp.pmem().clone();
    pm.zero(seg, len)?;
    pm.write_u64(seg, SEG_MAGIC)?;
    pm.write_u64(seg + 8, index as u64)?;
    pm.write_u64(seg + 16, buckets)?;
    pm.persist(seg, len)?;
    Ok(seg)
}

impl Table {
    /// Allocate segment 0 and write the root at `root`, in one transaction.
    pub fn create<S: Space + ?Sized>(sp: &mut S, root: u64, base: u64, hasher: Arc<dyn KeyHasher>) -> Result<Self> {
        if base == 0 || !base.is_power_of_two() {
            return Err(Error::Invalid(format!("table base size {base} is not a power of two")));
        }
        let seg = atomically(sp, |sp| {
            let seg = new_segment(sp, 0, base)?;
            sp.record(root, ROOT_SIZE)?;
            let mut r = [0u8; ROOT_SIZE as usize];
            r[0..8].copy_from_slice(&TABLE_MAGIC.to_le_bytes());
            r[8..16].copy_from_slice(&base.to_le_bytes());
            r[16..24].copy_from_slice(&1u64.to_le_bytes());
            r[24..32].copy_from_slice(&seg.to_le_bytes());
            sp.pmem().write(root, &r)?;
            Ok(seg)
        })?;
        Ok(Self { root, base, segs: vec![seg], hasher, count: 0, expanding: false })
    }

    /// Load the segment chain. Entries that are neither free nor committed
    /// are cleared. If the expanding marker is set the caller must run
    /// [`Table::rebuild`].
    pub fn open(pm: &Pmem, root: u64, hasher: Arc<dyn KeyHasher>) -> Result<Self> {
        if pm.read_u64(root)? != TABLE_MAGIC {
            return Err(Error::Corrupt(format!("no table root at {root:#x}")));
        }
        let base = pm.read_u64(root + R_BASE)?;
        let n = pm.read_u64(root + R_COUNT)? as usize;
        if base == 0 || !base.is_power_of_two() || n == 0 || n > MAX_SEGMENTS {
            return Err(Error::Corrupt("table geometry".into()));
        }
        let mut segs = Vec::with_capacity(n);
        let mut cur = pm.read_u64(root + R_FIRST)?;
        for k in 0..n {
            if pm.read_u64(cur)? != SEG_MAGIC
                || pm.read_u64(cur + 8)? != k as u64
                || pm.read_u64(cur + 16)? != segment_buckets(base, k)
            {
                return Err(Error::Corrupt(format!("segment {k} at {cur:#x}")));
            }
            segs.push(cur);
            cur = pm.read_u64(cur + S_NEXT)?;
        }
        let expanding = pm.read_u64(root + R_EXPANDING)? != 0;
        let mut t = Self { root, base, segs, hasher, count: 0, expanding };
        for g in 0..t.total() {
            let e = t.read(pm, g)?;
            match e.state() {
                FREE => {}
                COMMITTED => t.count += 1,
                _ => {
                    pm.write_persist(t.slot_addr(g) + 8, &[0u8; 56])?;
                }
            }
        }
        Ok(t)
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn segments(&self) -> usize {
        self.segs.len()
    }

    pub fn total(&self) -> u64 {
        total_buckets(self.base, self.segs.len())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_expanding(&self) -> bool {
        self.expanding
    }

    fn h(&self) -> u64 {
        HOP_BITS.min(self.total())
    }

    pub fn slot_addr(&self, g: u64) -> u64 {
        let (s, o) = split_global(g, self.base);
        self.segs[s] + SEG_HDR + o * ENTRY_SIZE
    }

    pub fn read(&self, pm: &Pmem, g: u64) -> Result<HashEntry> {
        let mut b = [0u8; 64];
        pm.read(self.slot_addr(g), &mut b)?;
        Ok(HashEntry::decode(&b))
    }

    pub fn hop(&self, pm: &Pmem, g: u64) -> Result<u64> {
        pm.read_u64(self.slot_addr(g))
    }

    pub fn hash(&self, key: &[u8]) -> u64 {
        self.hasher.hash(key)
    }

    pub fn home(&self, hash: u64) -> u64 {
        hash & (self.total() - 1)
    }

    fn dist(&self, from: u64, to: u64) -> u64 {
        let t = self.total();
        (to + t - from) % t
    }

    pub fn key_of(pm: &Pmem, e: &HashEntry) -> Result<Vec<u8>> {
        Self::field_bytes(pm, &e.key_field())
    }

    pub fn field_bytes(pm: &Pmem, f: &Field) -> Result<Vec<u8>> {
        match f {
            Field::Inline(b) => Ok(b.clone()),
            Field::Remote { offset, len } => pm.read_vec(*offset, *len),
        }
    }

    fn home_of_entry(&self, pm: &Pmem, e: &HashEntry) -> Result<u64> {
        Ok(self.home(self.hash(&Self::key_of(pm, e)?)))
    }

    fn key_eq(pm: &Pmem, e: &HashEntry, key: &[u8]) -> Result<bool> {
        let f = e.key_field();
        if f.len() != key.len() as u64 {
            return Ok(false);
        }
        Ok(Self::field_bytes(pm, &f)? == key)
    }

    pub fn value_loc(&self, g: u64, e: &HashEntry) -> ValueLoc {
        match e.value_field() {
            Field::Inline(b) => ValueLoc { offset: self.slot_addr(g) + VALUE_FIELD, len: b.len() as u64 },
            Field::Remote { offset, len } => ValueLoc { offset, len },
        }
    }

    /// Slot and entry holding `key`, if committed.
    pub fn find(&self, pm: &Pmem, key: &[u8]) -> Result<Option<(u64, HashEntry)>> {
        let home = self.home(self.hash(key));
        let mut hop = self.hop(pm, home)? & HOP_MASK;
        while hop != 0 {
            let i = hop.trailing_zeros() as u64;
            hop &= hop - 1;
            let g = (home + i) % self.total();
            let e = self.read(pm, g)?;
            if e.is_committed() && Self::key_eq(pm, &e, key)? {
                return Ok(Some((g, e)));
            }
        }
        Ok(None)
    }

    /// Committed entries in slot order.
    pub fn committed(&self, pm: &Pmem) -> Result<Vec<(u64, HashEntry)>> {
        let mut v = Vec::with_capacity(self.count as usize);
        for g in 0..self.total() {
            let e = self.read(pm, g)?;
            if e.is_committed() {
                v.push((g, e));
            }
        }
        Ok(v)
    }

    /// Insert a new entry. The slot is made available first (committing any
    /// displacement or growth), then `build` allocates payloads and returns
    /// the entry, which is linked in the same transaction.
    pub fn insert<S: Space + ?Sized>(
        &mut self,
        sp: &mut S,
        hash: u64,
        build: impl FnOnce(&mut S) -> Result<HashEntry>,
    ) -> Result<u64> {
        let (home, slot) = self.ensure_slot(sp, hash)?;
        let this = &*self;
        atomically(sp, |sp| {
            let e = build(sp)?;
            this.link(sp, home, slot, &e)
        })?;
        self.count += 1;
        Ok(slot)
    }

    fn link<S: Space + ?Sized>(&self, sp: &mut S, home: u64, slot: u64, e: &HashEntry) -> Result<()> {
        let pm = sp.pmem().clone();
        let at = self.slot_addr(slot);
        sp.record(at + 8, 56)?;
        pm.write(at + 8, &e.body())?;
        let h_at = self.slot_addr(home);
        sp.record(h_at, 8)?;
        let hop = pm.read_u64(h_at)? | 1 << self.dist(home, slot);
        pm.write_u64(h_at, hop)
    }

    /// Replace an entry's body in place (inside the caller's transaction).
    pub fn update<S: Space + ?Sized>(&self, sp: &mut S, slot: u64, e: &HashEntry) -> Result<()> {
        let at = self.slot_addr(slot);
        sp.record(at + 8, 56)?;
        sp.pmem().write(at + 8, &e.body())
    }

    /// Remove the entry at `slot`; `extra` runs in the same transaction
    /// (payload frees).
    pub fn remove<S: Space + ?Sized>(
        &mut self,
        sp: &mut S,
        slot: u64,
        extra: impl FnOnce(&mut S) -> Result<()>,
    ) -> Result<()> {
        let pm = sp.pmem().clone();
        let e = self.read(&pm, slot)?;
        let home = self.home_of_entry(&pm, &e)?;
        let this = &*self;
        atomically(sp, |sp| {
            let at = this.slot_addr(slot);
            sp.record(at + 8, 56)?;
            pm.write(at + 8, &[0u8; 56])?;
            let h_at = this.slot_addr(home);
            sp.record(h_at, 8)?;
            let hop = pm.read_u64(h_at)? & !(1 << this.dist(home, slot));
            pm.write_u64(h_at, hop)?;
            extra(sp)
        })?;
        self.count -= 1;
        Ok(())
    }

    fn ensure_slot<S: Space + ?Sized>(&mut self, sp: &mut S, hash: u64) -> Result<(u64, u64)> {
        for _ in 0..=MAX_GROWTH_PER_INSERT {
            let home = self.home(hash);
            match self.make_room(sp, home) {
                Ok(slot) => return Ok((home, slot)),
                Err(Error::NeedsExpansion) => self.expand(sp)?,
                Err(e) => return Err(e),
            }
        }
        Err(Error::NoSpace)
    }

    /// Find a free slot and hop it back into `home`'s neighbourhood.
    fn make_room<S: Space + ?Sized>(&mut self, sp: &mut S, home: u64) -> Result<u64> {
        let pm = sp.pmem().clone();
        let total = self.total();
        let h = self.h();
        let mut free = None;
        for d in 0..total {
            let g = (home + d) % total;
            if self.read(&pm, g)?.state() == FREE {
                free = Some(g);
                break;
            }
        }
        let mut j = free.ok_or(Error::NeedsExpansion)?;
        while self.dist(home, j) >= h {
            let mut moved = None;
            'search: for back in (1..h).rev() {
                let b = (j + total - back) % total;
                let hop = self.hop(&pm, b)?;
                for i in 0..back {
                    if hop >> i & 1 == 1 {
                        moved = Some((b, (b + i) % total));
                        break 'search;
                    }
                }
            }
            let (b, m) = moved.ok_or(Error::NeedsExpansion)?;
            self.move_entry(sp, b, m, j)?;
            j = m;
        }
        Ok(j)
    }

    /// Move the entry at `from` (homed at `home`) to the free slot `to`.
    fn move_entry<S: Space + ?Sized>(&self, sp: &mut S, home: u64, from: u64, to: u64) -> Result<()> {
        let pm = sp.pmem().clone();
        let h = self.h();
        atomically(sp, |sp| {
            let e = self.read(&pm, from)?;
            let (fa, ta, ha) = (self.slot_addr(from), self.slot_addr(to), self.slot_addr(home));
            sp.record(ta + 8, 56)?;
            sp.record(fa + 8, 56)?;
            sp.record(ha, 8)?;
            pm.write(ta + 8, &e.body())?;
            pm.write(fa + 8, &[0u8; 56])?;
            let mut hop = pm.read_u64(ha)?;
            let df = self.dist(home, from);
            if df < h {
                hop &= !(1 << df);
            }
            hop |= 1 << self.dist(home, to);
            pm.write_u64(ha, hop)
        })
    }

    fn link_segment<S: Space + ?Sized>(&mut self, sp: &mut S) -> Result<()> {
        let k = self.segs.len();
        if k >= MAX_SEGMENTS {
            return Err(Error::NoSpace);
        }
        let buckets = segment_buckets(self.base, k);
        let last = *self.segs.last().expect("segment 0");
        let root = self.root;
        let seg = atomically(sp, |sp| {
            let seg = new_segment(sp, k, buckets)?;
            let pm = sp.pmem().clone();
            sp.record(last + S_NEXT, 8)?;
            pm.write_u64(last + S_NEXT, seg)?;
            sp.record(root + R_COUNT, 24)?;
            pm.write_u64(root + R_COUNT, k as u64 + 1)?;
            pm.write_u64(root + R_EXPANDING, 1)?;
            Ok(seg)
        })?;
        self.segs.push(seg);
        self.expanding = true;
        Ok(())
    }

    /// Append a segment (doubling the bucket count) and redistribute.
    pub fn expand<S: Space + ?Sized>(&mut self, sp: &mut S) -> Result<()> {
        self.link_segment(sp)?;
        self.rebuild(sp)
    }

    /// Recompute every hop word from the committed entries, then move the
    /// entries that fell outside their neighbourhood. Idempotent.
    pub fn rebuild<S: Space + ?Sized>(&mut self, sp: &mut S) -> Result<()> {
        let pm = sp.pmem().clone();
        'again: loop {
            let total = self.total();
            let h = self.h();
            let mut hops = vec![0u64; total as usize];
            let mut misplaced = Vec::new();
            let mut count = 0;
            for g in 0..total {
                let e = self.read(&pm, g)?;
                if !e.is_committed() {
                    continue;
                }
                count += 1;
                let home = self.home_of_entry(&pm, &e)?;
                let d = self.dist(home, g);
                if d < h {
                    hops[home as usize] |= 1 << d;
                } else {
                    misplaced.push((g, home));
                }
            }
            for g in 0..total {
                if self.hop(&pm, g)? != hops[g as usize] {
                    pm.write_u64_persist(self.slot_addr(g), hops[g as usize])?;
                }
            }
            self.count = count;
            for (from, home) in misplaced {
                match self.make_room(sp, home) {
                    Ok(to) => self.move_entry(sp, home, from, to)?,
                    Err(Error::NeedsExpansion) => {
                        self.link_segment(sp)?;
                        continue 'again;
                    }
                    Err(e) => return Err(e),
                }
            }
            pm.write_u64_persist(self.root + R_EXPANDING, 0)?;
            self.expanding = false;
            return Ok(());
        }
    }

    /// Check the hopscotch invariants over the whole table.
    pub fn audit(&self, pm: &Pmem) -> std::result::Result<(), String> {
        let total = self.total();
        let h = self.h();
        let err = |e: Error| e.to_string();
        let mut committed = 0;
        for g in 0..total {
            let e = self.read(pm, g).map_err(err)?;
            if e.hop & !HOP_MASK != 0 {
                return Err(format!("bucket {g}: reserved hop bit set"));
            }
            let mut hop = e.hop;
            while hop != 0 {
                let i = hop.trailing_zeros() as u64;
                hop &= hop - 1;
                if i >= h {
                    return Err(format!("bucket {g}: hop bit {i} beyond neighbourhood"));
                }
                let t = (g + i) % total;
                let te = self.read(pm, t).map_err(err)?;
                if !te.is_committed() || self.home_of_entry(pm, &te).map_err(err)? != g {
                    return Err(format!("bucket {g}: hop bit {i} points at a foreign or empty slot"));
                }
            }
            if e.is_committed() {
                committed += 1;
                let home = self.home_of_entry(pm, &e).map_err(err)?;
                let d = self.dist(home, g);
                if d >= h {
                    return Err(format!("slot {g}: {d} away from home {home}"));
                }
                if self.hop(pm, home).map_err(err)? >> d & 1 == 0 {
                    return Err(format!("slot {g}: home {home} lacks hop bit {d}"));
                }
            }
        }
        if committed != self.count {
            return Err(format!("count {} but {committed} committed entries", self.count));
        }
        Ok(())
    }

    /// Persistent objects owned by the table: segments and out-of-line
    /// key/value payloads.
    pub fn live_objects(&self, pm: &Pmem) -> Result<Vec<(u64, u64)>> {
        let mut v: Vec<(u64, u64)> = self
            .segs
            .iter()
            .enumerate()
            .map(|(k, &s)| (s, SEG_HDR + segment_buckets(self.base, k) * ENTRY_SIZE))
            .collect();
        for (_, e) in self.committed(pm)? {
            for f in [e.key_field(), e.value_field()] {
                if let Field::Remote { offset, len } = f {
                    v.push((offset, len));
                }
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_segment_is_mod_base() {
        for h in [0u64, 1, 1023, 1024, 5000, u64::MAX] {
            assert_eq!(bucket_of(h, 1024, 1), (0, h % 1024));
        }
    }

    #[test]
    fn second_segment_takes_bit_ten() {
        let h = (1 << 10) | 77;
        assert_eq!(bucket_of(h, 1024, 2), (1, 77));
        assert_eq!(bucket_of(77, 1024, 2), (0, 77));
    }

    #[test]
    fn growth_keeps_or_moves_to_newest() {
        let base = 8;
        for h in 0..(1u64 << 12) {
            for s in 1..8 {
                let before = bucket_of(h, base, s);
                let after = bucket_of(h, base, s + 1);
                assert!(after == before || after.0 == s, "h={h} s={s}");
            }
        }
    }

    #[test]
    fn partition_balance() {
        // every (segment, offset) pair is hit equally often
        let (base, s) = (1024u64, 3);
        let mut counts = std::collections::HashMap::new();
        for h in 0..(1u64 << 14) {
            *counts.entry(bucket_of(h, base, s)).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len() as u64, total_buckets(base, s));
        assert!(counts.values().all(|&c| c == 4));
        for k in 0..s {
            let n = counts.keys().filter(|a| a.0 == k).count() as u64;
            assert_eq!(n, segment_buckets(base, k));
        }
    }

    #[test]
    fn addresses_valid() {
        for s in 1..6 {
            for h in 0..4096u64 {
                let (k, o) = bucket_of(h, 16, s);
                assert!(k < s && o < segment_buckets(16, k));
            }
        }
    }
}
