//! Per-shard persistent arena and its coarse region allocator.
//!
//! On-media layout (little-endian):
//!
//! ```text
//! 0      header (4096 B): magic "MCA1", version u32, capacity u64,
//!        region-table offset u64, undo-log offset u64, descriptor count u64
//! 4096   region table: count x (offset u64, length u64, owner u64)
//! ...    undo log: valid u64, saved offset u64, saved length u64, pad,
//!        then saved table bytes
//! 32 MiB first payload region
//! ```
//!
//! The first 32 MiB granule holds the metadata; descriptor `i` always covers
//! granule `i + 1`. Table updates are made write-atomic with a single-slot
//! undo log whose `valid` word is set last when arming and cleared first
//! when disarming.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pmem::{Image, Pmem};

pub const REGION_SIZE: u64 = 32 << 20;
pub const MIN_CAPACITY: u64 = 64 << 20;
pub const HEADER_SIZE: u64 = 4096;
pub const MAGIC: u32 = u32::from_le_bytes(*b"MCA1");
pub const VERSION: u32 = 1;
pub const FREE: u64 = 0;
const DESC_SIZE: u64 = 24;

/// Which persistence backend an arena uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArenaBackend {
    MappedFile,
    CrashSim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionDescriptor {
    pub offset: u64,
    pub length: u64,
    pub owner: u64,
}

impl RegionDescriptor {
    fn encode(&self) -> [u8; DESC_SIZE as usize] {
        let mut b = [0u8; DESC_SIZE as usize];
        b[0..8].copy_from_slice(&self.offset.to_le_bytes());
        b[8..16].copy_from_slice(&self.length.to_le_bytes());
        b[16..24].copy_from_slice(&self.owner.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Self {
        let w = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Self { offset: w(0), length: w(8), owner: w(16) }
    }
}

#[derive(Debug)]
pub struct PersistentArena {
    pmem: Pmem,
    capacity: u64,
    table_off: u64,
    undo_off: u64,
    table: Vec<RegionDescriptor>,
}

fn check_capacity(capacity: u64) -> Result<()> {
    if capacity < MIN_CAPACITY || capacity % REGION_SIZE != 0 {
        return Err(Error::BadCapacity(capacity));
    }
    Ok(())
}

impl PersistentArena {
    /// Open (recovering) or format an arena on a memory-mapped file.
    pub fn open_file(path: &Path, capacity: u64) -> Result<Self> {
        check_capacity(capacity)?;
        let (pmem, _) = Pmem::map_file(path, capacity)?;
        Self::open(pmem)
    }

    /// Fresh crash-simulating arena.
    pub fn crash_sim(capacity: u64) -> Result<Self> {
        check_capacity(capacity)?;
        Self::open(Pmem::crash_sim(capacity))
    }

    /// Reopen a crash image (runs recovery).
    pub fn from_image(image: Image) -> Result<Self> {
        Self::open(Pmem::from_image(image))
    }

    /// Open over existing memory: an all-zero header formats, a valid header
    /// recovers, anything else is corrupt.
    pub fn open(pmem: Pmem) -> Result<Self> {
        let capacity = pmem.capacity();
        check_capacity(capacity)?;
        let magic = pmem.read_u64(0)? as u32;
        if magic == 0 {
            return Self::format(pmem);
        }
        if magic != MAGIC {
            return Err(Error::CorruptHeader(format!("bad magic {magic:#010x}")));
        }
        let version = (pmem.read_u64(0)? >> 32) as u32;
        if version != VERSION {
            return Err(Error::CorruptHeader(format!("unsupported version {version}")));
        }
        let cap = pmem.read_u64(8)?;
        let table_off = pmem.read_u64(16)?;
        let undo_off = pmem.read_u64(24)?;
        let count = pmem.read_u64(32)?;
        if cap != capacity || count != capacity / REGION_SIZE - 1 || table_off != HEADER_SIZE {
            return Err(Error::CorruptHeader("geometry mismatch".into()));
        }
        let mut arena = Self { pmem, capacity, table_off, undo_off, table: Vec::new() };
        arena.recover_undo()?;
        arena.load_table(count)?;
        Ok(arena)
    }

    fn layout(capacity: u64) -> (u64, u64, u64) {
        let count = capacity / REGION_SIZE - 1;
        let table_off = HEADER_SIZE;
        let undo_off = (table_off + count * DESC_SIZE).next_multiple_of(64);
        (count, table_off, undo_off)
    }

    fn format(pmem: Pmem) -> Result<Self> {
        let capacity = pmem.capacity();
        let (count, table_off, undo_off) = Self::layout(capacity);
        let mut table = Vec::with_capacity(count as usize);
        let mut bytes = Vec::with_capacity((count * DESC_SIZE) as usize);
        for i in 0..count {
            let d = RegionDescriptor { offset: (i + 1) * REGION_SIZE, length: REGION_SIZE, owner: FREE };
            bytes.extend_from_slice(&d.encode());
            table.push(d);
        }
        pmem.write_persist(table_off, &bytes)?;
        pmem.write_persist(undo_off, &[0u8; 64])?;
        let mut hdr = [0u8; 40];
        hdr[4..8].copy_from_slice(&VERSION.to_le_bytes());
        hdr[8..16].copy_from_slice(&capacity.to_le_bytes());
        hdr[16..24].copy_from_slice(&table_off.to_le_bytes());
        hdr[24..32].copy_from_slice(&undo_off.to_le_bytes());
        hdr[32..40].copy_from_slice(&count.to_le_bytes());
        pmem.write_persist(0, &hdr)?;
        // magic last: a torn format reads back as unformatted
        pmem.write_persist(0, &MAGIC.to_le_bytes())?;
        Ok(Self { pmem, capacity, table_off, undo_off, table })
    }

    fn load_table(&mut self, count: u64) -> Result<()> {
        let bytes = self.pmem.read_vec(self.table_off, count * DESC_SIZE)?;
        self.table = bytes.chunks_exact(DESC_SIZE as usize).map(RegionDescriptor::decode).collect();
        for (i, d) in self.table.iter().enumerate() {
            if d.offset != (i as u64 + 1) * REGION_SIZE || d.length != REGION_SIZE {
                return Err(Error::Corrupt(format!("region descriptor {i} malformed")));
            }
        }
        Ok(())
    }

    fn recover_undo(&mut self) -> Result<()> {
        if self.pmem.read_u64(self.undo_off)? == 0 {
            return Ok(());
        }
        let off = self.pmem.read_u64(self.undo_off + 8)?;
        let len = self.pmem.read_u64(self.undo_off + 16)?;
        let image = self.pmem.read_vec(self.undo_off + 64, len)?;
        self.pmem.write_persist(off, &image)?;
        self.pmem.write_u64_persist(self.undo_off, 0)?;
        Ok(())
    }

    /// Replace descriptors `first..=last` with `new` under the undo log.
    fn update_table(&mut self, first: usize, new: &[RegionDescriptor]) -> Result<()> {
        let off = self.table_off + first as u64 * DESC_SIZE;
        let len = new.len() as u64 * DESC_SIZE;
        let saved = self.pmem.read_vec(off, len)?;
        self.pmem.write(self.undo_off + 8, &off.to_le_bytes())?;
        self.pmem.write(self.undo_off + 16, &len.to_le_bytes())?;
        self.pmem.write(self.undo_off + 64, &saved)?;
        self.pmem.persist(self.undo_off + 8, 16)?;
        self.pmem.persist(self.undo_off + 64, len)?;
        self.pmem.write_u64_persist(self.undo_off, 1)?;

        let bytes: Vec<u8> = new.iter().flat_map(|d| d.encode()).collect();
        self.pmem.write_persist(off, &bytes)?;

        self.pmem.write_u64_persist(self.undo_off, 0)?;
        self.table[first..first + new.len()].copy_from_slice(new);
        Ok(())
    }

    pub fn pmem(&self) -> &Pmem {
        &self.pmem
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn backend(&self) -> ArenaBackend {
        if self.pmem.is_crash_sim() {
            ArenaBackend::CrashSim
        } else {
            ArenaBackend::MappedFile
        }
    }

    /// Offset of the first byte handed out to pools.
    pub fn header_size(&self) -> u64 {
        REGION_SIZE
    }

    pub fn descriptors(&self) -> &[RegionDescriptor] {
        &self.table
    }

    pub fn regions_of(&self, owner: u64) -> Vec<RegionDescriptor> {
        self.table.iter().filter(|d| d.owner == owner && owner != FREE).copied().collect()
    }

    /// Distinct owners holding at least one region, ascending.
    pub fn owners(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.table.iter().map(|d| d.owner).filter(|&o| o != FREE).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn free_bytes(&self) -> u64 {
        self.table.iter().filter(|d| d.owner == FREE).count() as u64 * REGION_SIZE
    }

    /// Allocate `ceil(size / 32 MiB)` regions for `owner`, preferring the
    /// lowest contiguous run.
    pub fn region_alloc(&mut self, owner: u64, size: u64) -> Result<Vec<RegionDescriptor>> {
        if size == 0 {
            return Err(Error::Invalid("region_alloc of zero bytes".into()));
        }
        if owner == FREE {
            return Err(Error::Invalid("owner id 0 is the free sentinel".into()));
        }
        let want = size.div_ceil(REGION_SIZE) as usize;
        let free: Vec<usize> = (0..self.table.len()).filter(|&i| self.table[i].owner == FREE).collect();
        if free.len() < want {
            return Err(Error::NoSpace);
        }
        let chosen: Vec<usize> = free
            .windows(want)
            .find(|w| w[want - 1] - w[0] == want - 1)
            .map(|w| w.to_vec())
            .unwrap_or_else(|| free[..want].to_vec());
        let (first, last) = (chosen[0], *chosen.last().unwrap());
        let mut new = self.table[first..=last].to_vec();
        for &i in &chosen {
            new[i - first].owner = owner;
        }
        self.update_table(first, &new)?;
        Ok(chosen.iter().map(|&i| self.table[i]).collect())
    }

    /// Zero-fill and release every region of `owner`. Returns bytes freed.
    pub fn region_free(&mut self, owner: u64) -> Result<u64> {
        let idx: Vec<usize> = (0..self.table.len()).filter(|&i| self.table[i].owner == owner && owner != FREE).collect();
        if idx.is_empty() {
            return Err(Error::UnknownPool(owner));
        }
        for &i in &idx {
            let d = self.table[i];
            self.pmem.zero(d.offset, d.length)?;
            self.pmem.persist(d.offset, d.length)?;
        }
        let (first, last) = (idx[0], *idx.last().unwrap());
        let mut new = self.table[first..=last].to_vec();
        for &i in &idx {
            new[i - first].owner = FREE;
        }
        self.update_table(first, &new)?;
        Ok(idx.len() as u64 * REGION_SIZE)
    }

    /// Check the non-overlap / coverage invariant of the table.
    pub fn audit(&self) -> Result<()> {
        let mut end = REGION_SIZE;
        for d in &self.table {
            if d.offset != end || d.length % REGION_SIZE != 0 || d.offset + d.length > self.capacity {
                return Err(Error::Corrupt(format!("descriptor {d:?} breaks coverage")));
            }
            end = d.offset + d.length;
        }
        if end != self.capacity {
            return Err(Error::Corrupt("table does not cover payload".into()));
        }
        Ok(())
    }
}

/// Merge descriptors into sorted, coalesced `(offset, length)` extents.
pub fn extents_of(regions: &[RegionDescriptor]) -> Vec<(u64, u64)> {
    let mut v: Vec<(u64, u64)> = regions.iter().map(|d| (d.offset, d.length)).collect();
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
