//! Volatile payload allocator, rebuilt after restart from the key/value
//! length records kept in persistent memory.
//!
//! Objects up to 4 KiB live in power-of-two size classes carved out of
//! 1 MiB slabs (aligned to 1 MiB in arena offsets, so an object's slab is
//! recoverable from its offset alone). Larger objects and the slabs
//! themselves come from a best-fit extent allocator.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const MIN_CLASS: u64 = 8;
pub const MAX_SMALL: u64 = 4096;
pub const SLAB_SIZE: u64 = 1 << 20;
pub const LARGE_GRAIN: u64 = 64;
const CLASSES: usize = 10; // 8 ..= 4096

/// Size class for a small object, or `None` for the large path.
pub fn class_of(size: u64) -> Option<u64> {
    (size <= MAX_SMALL).then(|| size.max(MIN_CLASS).next_power_of_two())
}

fn class_index(class: u64) -> usize {
    (class.trailing_zeros() - MIN_CLASS.trailing_zeros()) as usize
}

/// Best-fit extent allocator; ties go to the lowest address.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LargeAllocator {
    by_addr: BTreeMap<u64, u64>,
    by_size: BTreeSet<(u64, u64)>,
    live: BTreeMap<u64, u64>,
}

impl LargeAllocator {
    pub fn new(extents: &[(u64, u64)]) -> Self {
        let mut a = Self::default();
        for &(o, l) in extents {
            if l > 0 {
                a.insert_free(o, l);
            }
        }
        a
    }

    fn insert_free(&mut self, mut off: u64, mut len: u64) {
        if let Some((&p, &pl)) = self.by_addr.range(..off).next_back() {
            if p + pl == off {
                self.remove_free(p);
                off = p;
                len += pl;
            }
        }
        if let Some(&nl) = self.by_addr.get(&(off + len)) {
            self.remove_free(off + len);
            len += nl;
        }
        self.by_addr.insert(off, len);
        self.by_size.insert((len, off));
    }

    fn remove_free(&mut self, off: u64) -> u64 {
        let len = self.by_addr.remove(&off).expect("free extent");
        self.by_size.remove(&(len, off));
        len
    }

    /// Carve `[off, off+len)` out of the free extent that contains it.
    fn carve(&mut self, off: u64, len: u64) -> Result<()> {
        let (&fo, &fl) = self.by_addr.range(..=off).next_back().ok_or(Error::Overlap(off))?;
        if off + len > fo + fl {
            return Err(Error::Overlap(off));
        }
        self.remove_free(fo);
        if off > fo {
            self.by_addr.insert(fo, off - fo);
            self.by_size.insert((off - fo, fo));
        }
        if fo + fl > off + len {
            let t = off + len;
            self.by_addr.insert(t, fo + fl - t);
            self.by_size.insert((fo + fl - t, t));
        }
        Ok(())
    }

    pub fn alloc(&mut self, size: u64) -> Result<u64> {
        let len = size.max(1).next_multiple_of(LARGE_GRAIN);
        let &(_, off) = self.by_size.range((len, 0)..).next().ok_or(Error::NoSpace)?;
        self.carve(off, len)?;
        self.live.insert(off, len);
        Ok(off)
    }

    /// Smallest extent holding an `align`-aligned window of `len` bytes.
    pub fn alloc_aligned(&mut self, len: u64, align: u64) -> Result<u64> {
        let start = self
            .by_size
            .range((len, 0)..)
            .find_map(|&(l, o)| {
                let s = o.next_multiple_of(align);
                (s + len <= o + l).then_some(s)
            })
            .ok_or(Error::NoSpace)?;
        self.carve(start, len)?;
        self.live.insert(start, len);
        Ok(start)
    }

    /// Mark a known-live range as allocated (reconstitution).
    pub fn reserve(&mut self, off: u64, len: u64) -> Result<()> {
        self.carve(off, len)?;
        self.live.insert(off, len);
        Ok(())
    }

    pub fn free(&mut self, off: u64) -> Result<u64> {
        let len = self.live.remove(&off).ok_or(Error::BadFree(off))?;
        self.insert_free(off, len);
        Ok(len)
    }

    pub fn live_len(&self, off: u64) -> Option<u64> {
        self.live.get(&off).copied()
    }

    pub fn free_bytes(&self) -> u64 {
        self.by_addr.values().sum()
    }

    pub fn free_extents(&self) -> Vec<(u64, u64)> {
        self.by_addr.iter().map(|(&o, &l)| (o, l)).collect()
    }

    pub fn live(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.live.iter().map(|(&o, &l)| (o, l))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Slab {
    bits: Vec<u64>,
    used: u64,
}

impl Slab {
    fn new(class: u64) -> Self {
        let slots = SLAB_SIZE / class;
        Self { bits: vec![0; slots.div_ceil(64) as usize], used: 0 }
    }

    fn slots(&self, class: u64) -> u64 {
        SLAB_SIZE / class
    }

    fn first_free(&self, class: u64) -> Option<u64> {
        let slots = self.slots(class);
        self.bits
            .iter()
            .enumerate()
            .find(|(_, &w)| w != u64::MAX)
            .map(|(i, w)| i as u64 * 64 + (!w).trailing_zeros() as u64)
            .filter(|&s| s < slots)
    }

    fn test(&self, slot: u64) -> bool {
        self.bits[(slot / 64) as usize] >> (slot % 64) & 1 == 1
    }

    fn set(&mut self, slot: u64, on: bool) {
        let w = &mut self.bits[(slot / 64) as usize];
        if on {
            *w |= 1 << (slot % 64);
            self.used += 1;
        } else {
            *w &= !(1 << (slot % 64));
            self.used -= 1;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Bucket {
    slabs: BTreeMap<u64, Slab>,
    // every slab below the cursor is full
    cursor: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconAllocator {
    large: LargeAllocator,
    buckets: Vec<Bucket>,
    // slab base -> class, for frees and reconstitution
    slab_class: BTreeMap<u64, u64>,
}

impl ReconAllocator {
    pub fn new(extents: &[(u64, u64)]) -> Self {
        Self {
            large: LargeAllocator::new(extents),
            buckets: vec![Bucket::default(); CLASSES],
            slab_class: BTreeMap::new(),
        }
    }

    pub fn alloc(&mut self, size: u64) -> Result<u64> {
        if size == 0 {
            return Err(Error::Invalid("allocation of zero bytes".into()));
        }
        let Some(class) = class_of(size) else {
            return self.large.alloc(size);
        };
        let b = &mut self.buckets[class_index(class)];
        let found = b
            .slabs
            .range_mut(b.cursor..)
            .find_map(|(&base, s)| s.first_free(class).map(|slot| (base, slot)));
        let (base, slot) = match found {
            Some(hit) => hit,
            None => {
                let base = self.large.alloc_aligned(SLAB_SIZE, SLAB_SIZE)?;
                self.slab_class.insert(base, class);
                let b = &mut self.buckets[class_index(class)];
                b.slabs.insert(base, Slab::new(class));
                (base, 0)
            }
        };
        let b = &mut self.buckets[class_index(class)];
        b.cursor = base;
        b.slabs.get_mut(&base).expect("slab").set(slot, true);
        Ok(base + slot * class)
    }

    pub fn free(&mut self, off: u64, size: u64) -> Result<()> {
        let Some(class) = class_of(size) else {
            return match self.large.live_len(off) {
                Some(l) if l == size.next_multiple_of(LARGE_GRAIN) && !self.slab_class.contains_key(&off) => {
                    self.large.free(off).map(|_| ())
                }
                _ => Err(Error::BadFree(off)),
            };
        };
        let base = off & !(SLAB_SIZE - 1);
        if self.slab_class.get(&base) != Some(&class) || (off - base) % class != 0 {
            return Err(Error::BadFree(off));
        }
        let slot = (off - base) / class;
        let b = &mut self.buckets[class_index(class)];
        let slab = b.slabs.get_mut(&base).expect("slab");
        if !slab.test(slot) {
            return Err(Error::BadFree(off));
        }
        slab.set(slot, false);
        if slab.used == 0 {
            b.slabs.remove(&base);
            self.slab_class.remove(&base);
            self.large.free(base)?;
        }
        let b = &mut self.buckets[class_index(class)];
        b.cursor = b.cursor.min(base);
        Ok(())
    }

    /// Rebuild occupancy from live `(offset, length)` records.
    pub fn reconstitute(extents: &[(u64, u64)], live: &[(u64, u64)]) -> Result<Self> {
        let mut a = Self::new(extents);
        let mut objs = live.to_vec();
        objs.sort_unstable();
        for w in objs.windows(2) {
            if w[0].0 + w[0].1.max(1) > w[1].0 {
                return Err(Error::Overlap(w[1].0));
            }
        }
        // slabs first so that a large record landing inside one is caught
        let mut large = Vec::new();
        for &(off, len) in &objs {
            let Some(class) = class_of(len) else {
                large.push((off, len));
                continue;
            };
            let base = off & !(SLAB_SIZE - 1);
            match a.slab_class.get(&base) {
                Some(&c) if c != class => return Err(Error::Overlap(off)),
                Some(_) => {}
                None => {
                    a.large.reserve(base, SLAB_SIZE)?;
                    a.slab_class.insert(base, class);
                    a.buckets[class_index(class)].slabs.insert(base, Slab::new(class));
                }
            }
            if (off - base) % class != 0 {
                return Err(Error::Overlap(off));
            }
            let slab = a.buckets[class_index(class)].slabs.get_mut(&base).expect("slab");
            let slot = (off - base) / class;
            if slab.test(slot) {
                return Err(Error::Overlap(off));
            }
            slab.set(slot, true);
        }
        for (off, len) in large {
            a.large.reserve(off, len.next_multiple_of(LARGE_GRAIN))?;
        }
        Ok(a)
    }

    pub fn slab_count(&self) -> usize {
        self.slab_class.len()
    }

    pub fn free_bytes(&self) -> u64 {
        let slack: u64 = self
            .buckets
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                let class = MIN_CLASS << i;
                b.slabs.values().map(move |s| (s.slots(class) - s.used) * class)
            })
            .sum();
        self.large.free_bytes() + slack
    }

    /// Whether `[off, off+len)` intersects any live allocation.
    pub fn overlaps_live(&self, off: u64, len: u64) -> bool {
        let end = off + len;
        for (&base, &class) in self.slab_class.range(..end) {
            if base + SLAB_SIZE <= off {
                continue;
            }
            let slab = &self.buckets[class_index(class)].slabs[&base];
            let lo = off.max(base);
            let hi = end.min(base + SLAB_SIZE);
            let first = (lo - base) / class;
            let last = (hi - 1 - base) / class;
            if (first..=last).any(|s| slab.test(s)) {
                return true;
            }
        }
        self.large
            .live
            .range(..end)
            .any(|(&o, &l)| o + l > off && !self.slab_class.contains_key(&o))
    }

    /// Clear the slab cursors (reconstitution has no cursor history).
    pub fn normalize_cursors(&mut self) {
        for b in &mut self.buckets {
            b.cursor = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MIB: u64 = 1 << 20;

    fn ext() -> Vec<(u64, u64)> {
        vec![(32 * MIB + 8192, 32 * MIB - 8192), (96 * MIB, 32 * MIB)]
    }

    #[test]
    fn class_rounding() {
        assert_eq!(class_of(17), Some(32));
        assert_eq!(class_of(1), Some(8));
        assert_eq!(class_of(4096), Some(4096));
        assert_eq!(class_of(4097), None);
    }

    #[test]
    fn small_from_slab_large_from_extents() {
        let mut a = ReconAllocator::new(&ext());
        let s = a.alloc(4096).unwrap();
        assert_eq!(a.slab_count(), 1);
        assert_eq!(s % SLAB_SIZE, 0);
        let l = a.alloc(4097).unwrap();
        assert_eq!(a.slab_count(), 1);
        assert_eq!(a.large.live_len(l), Some(4160));
    }

    #[test]
    fn one_slab_holds_32768_objects_of_32_bytes() {
        let mut a = ReconAllocator::new(&ext());
        for _ in 0..32768 {
            a.alloc(32).unwrap();
        }
        assert_eq!(a.slab_count(), 1);
        a.alloc(32).unwrap();
        assert_eq!(a.slab_count(), 2);
    }

    #[test]
    fn free_returns_to_baseline() {
        let mut a = ReconAllocator::new(&ext());
        let fresh = a.clone();
        let x = a.alloc(100).unwrap();
        let y = a.alloc(10_000).unwrap();
        a.free(x, 100).unwrap();
        a.free(y, 10_000).unwrap();
        assert_eq!(a.slab_count(), 0);
        assert_eq!(a.large.free_extents(), fresh.large.free_extents());
        assert_eq!(a.free_bytes(), fresh.free_bytes());
    }

    #[test]
    fn double_and_unknown_free() {
        let mut a = ReconAllocator::new(&ext());
        let x = a.alloc(64).unwrap();
        let _keep = a.alloc(64).unwrap();
        a.free(x, 64).unwrap();
        assert_eq!(a.free(x, 64).unwrap_err(), Error::BadFree(x));
        assert_eq!(a.free(x, 8).unwrap_err(), Error::BadFree(x));
        assert!(a.free(5, 10_000).is_err());
    }

    #[test]
    fn emptied_slab_is_reclaimed() {
        let mut a = ReconAllocator::new(&ext());
        let v: Vec<u64> = (0..(SLAB_SIZE / 4096)).map(|_| a.alloc(4096).unwrap()).collect();
        assert_eq!(a.slab_count(), 1);
        let before = a.large.free_bytes();
        for o in v {
            a.free(o, 4096).unwrap();
        }
        assert_eq!(a.slab_count(), 0);
        assert_eq!(a.large.free_bytes(), before + SLAB_SIZE);
    }

    #[test]
    fn exhaustion() {
        let mut a = ReconAllocator::new(&[(0, 2 * MIB)]);
        a.alloc(MIB + 1).unwrap();
        assert_eq!(a.alloc(8).unwrap_err(), Error::NoSpace);
        assert!(a.alloc(MIB / 2).is_ok());
    }

    #[test]
    fn large_best_fit_lowest_address() {
        let mut l = LargeAllocator::new(&[(0, 1000 * 64), (100_000, 200 * 64), (200_000, 200 * 64)]);
        assert_eq!(l.alloc(100 * 64).unwrap(), 100_000);
        assert_eq!(l.alloc(150 * 64).unwrap(), 200_000);
    }

    #[test]
    fn reconstitute_empty_equals_fresh() {
        assert_eq!(ReconAllocator::reconstitute(&ext(), &[]).unwrap(), ReconAllocator::new(&ext()));
    }

    #[test]
    fn reconstitute_overlap() {
        let e = ext();
        let base = 32 * MIB + 8192;
        let err = ReconAllocator::reconstitute(&e, &[(base, 10_000), (base + 5000, 10_000)]).unwrap_err();
        assert!(matches!(err, Error::Overlap(_)));
        // two classes claiming one slab
        let err = ReconAllocator::reconstitute(&e, &[(40 * MIB, 8), (40 * MIB + 64, 64)]).unwrap_err();
        assert!(matches!(err, Error::Overlap(_)));
        // a large record inside a slab
        let err = ReconAllocator::reconstitute(&e, &[(40 * MIB, 8), (40 * MIB + 4096, 10_000)]).unwrap_err();
        assert!(matches!(err, Error::Overlap(_)));
    }

    fn random_trace(a: &mut ReconAllocator, rng: &mut ChaCha8Rng, n: usize) -> Vec<(u64, u64)> {
        let mut live: Vec<(u64, u64)> = Vec::new();
        for _ in 0..n {
            if !live.is_empty() && rng.random_bool(0.3) {
                let i = rng.random_range(0..live.len());
                let (o, s) = live.swap_remove(i);
                a.free(o, s).unwrap();
            } else {
                let s = if rng.random_bool(0.9) { rng.random_range(1..=4096) } else { rng.random_range(4097..100_000) };
                if let Ok(o) = a.alloc(s) {
                    live.push((o, s));
                }
            }
        }
        live
    }

    fn assert_disjoint(v: &[(u64, u64)]) {
        let mut v = v.to_vec();
        v.sort_unstable();
        for w in v.windows(2) {
            assert!(w[0].0 + w[0].1 <= w[1].0, "overlap {w:?}");
        }
    }

    #[test]
    fn reconstitute_then_allocate_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = ReconAllocator::new(&ext());
        let live = random_trace(&mut a, &mut rng, 3000);
        assert!(live.len() >= 1000);
        let mut r = ReconAllocator::reconstitute(&ext(), &live).unwrap();
        let mut all = live.clone();
        for _ in 0..1000 {
            let s = rng.random_range(1..8000);
            let o = r.alloc(s).unwrap();
            all.push((o, s));
        }
        assert_disjoint(&all);
    }

    #[test]
    fn reconstitute_matches_uncrashed_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = ReconAllocator::new(&ext());
        let live = random_trace(&mut a, &mut rng, 3000);
        let mut r = ReconAllocator::reconstitute(&ext(), &live).unwrap();
        a.normalize_cursors();
        r.normalize_cursors();
        assert_eq!(a, r);
    }

    proptest! {
        #[test]
        fn live_allocations_disjoint(ops in proptest::collection::vec((any::<bool>(), 1u64..20_000, any::<prop::sample::Index>()), 1..300)) {
            let mut a = ReconAllocator::new(&[(0, 8 * MIB)]);
            let mut live: Vec<(u64, u64)> = Vec::new();
            for (alloc, size, idx) in ops {
                if alloc || live.is_empty() {
                    if let Ok(o) = a.alloc(size) {
                        prop_assert!(!live.iter().any(|&(lo, ll)| lo < o + size && o < lo + ll));
                        live.push((o, size));
                    }
                } else {
                    let (o, s) = live.swap_remove(idx.index(live.len()));
                    a.free(o, s).unwrap();
                }
            }
        }
    }
}
