//! Volatile ordered-map engine. The index lives in DRAM, values in pool
//! memory; nothing survives a restart.

use std::collections::BTreeMap;

use super::pool::POOL_HEADER;
use super::{check_range, now_secs, Attributes, EngineKind, KvEngine, PoolInfo, ValueLoc, MAX_VALUE};
use crate::error::{Error, Result};
use crate::pmem::Pmem;
use crate::recon_alloc::ReconAllocator;

#[derive(Debug)]
pub struct MapStore {
    pmem: Pmem,
    extents: Vec<(u64, u64)>,
    alloc: ReconAllocator,
    map: BTreeMap<Vec<u8>, (ValueLoc, u32)>,
    blocks: BTreeMap<u64, u64>,
}

impl MapStore {
    pub fn new(pmem: Pmem, extents: &[(u64, u64)]) -> Self {
        let mut heap = vec![(extents[0].0 + POOL_HEADER, extents[0].1 - POOL_HEADER)];
        heap.extend_from_slice(&extents[1..]);
        Self {
            pmem,
            extents: extents.to_vec(),
            alloc: ReconAllocator::new(&heap),
            map: BTreeMap::new(),
            blocks: BTreeMap::new(),
        }
    }

    // zero-length values still get a block so every key has a location
    fn place(&mut self, len: u64) -> Result<ValueLoc> {
        let off = self.alloc.alloc(len.max(1))?;
        Ok(ValueLoc { offset: off, len })
    }

    fn release(&mut self, loc: ValueLoc) -> Result<()> {
        self.alloc.free(loc.offset, loc.len.max(1))
    }

    fn lookup(&self, key: &[u8]) -> Result<(ValueLoc, u32)> {
        self.map.get(key).copied().ok_or(Error::KeyNotFound)
    }
}

impl KvEngine for MapStore {
    fn kind(&self) -> EngineKind {
        EngineKind::MapStore
    }

    fn pmem(&self) -> &Pmem {
        &self.pmem
    }

    fn put(&mut self, key: &[u8], value: &[u8], no_overwrite: bool) -> Result<()> {
        if key.is_empty() {
            return Err(Error::Invalid("empty key".into()));
        }
        if value.len() as u64 > MAX_VALUE {
            return Err(Error::TooLarge);
        }
        let old = self.map.get(key).copied();
        if old.is_some() && no_overwrite {
            return Err(Error::AlreadyExists);
        }
        let loc = self.place(value.len() as u64)?;
        self.pmem.write_persist(loc.offset, value)?;
        self.map.insert(key.to_vec(), (loc, now_secs()));
        if let Some((o, _)) = old {
            self.release(o)?;
        }
        Ok(())
    }

    fn get(&self, key: &[u8]) -> Result<Vec<u8>> {
        let (loc, _) = self.lookup(key)?;
        self.pmem.read_vec(loc.offset, loc.len)
    }

    fn erase(&mut self, key: &[u8]) -> Result<()> {
        let (loc, _) = self.map.remove(key).ok_or(Error::KeyNotFound)?;
        self.release(loc)
    }

    fn locate(&self, key: &[u8]) -> Result<ValueLoc> {
        Ok(self.lookup(key)?.0)
    }

    fn locate_stable(&mut self, key: &[u8]) -> Result<ValueLoc> {
        self.locate(key)
    }

    fn create_key(&mut self, key: &[u8], len: u64) -> Result<(ValueLoc, bool)> {
        if key.is_empty() {
            return Err(Error::Invalid("empty key".into()));
        }
        if len > MAX_VALUE {
            return Err(Error::TooLarge);
        }
        if let Some(&(loc, _)) = self.map.get(key) {
            return Ok((loc, false));
        }
        let loc = self.place(len)?;
        self.pmem.zero(loc.offset, len)?;
        self.map.insert(key.to_vec(), (loc, now_secs()));
        Ok((loc, true))
    }

    fn resize_value(&mut self, key: &[u8], len: u64) -> Result<ValueLoc> {
        if len > MAX_VALUE {
            return Err(Error::TooLarge);
        }
        let (old, _) = self.lookup(key)?;
        let loc = self.place(len)?;
        let keep = old.len.min(len);
        let prefix = self.pmem.read_vec(old.offset, keep)?;
        self.pmem.write(loc.offset, &prefix)?;
        self.pmem.zero(loc.offset + keep, len - keep)?;
        self.pmem.persist(loc.offset, len)?;
        self.map.insert(key.to_vec(), (loc, now_secs()));
        self.release(old)?;
        Ok(loc)
    }

    fn write_range(&mut self, key: &[u8], offset: u64, data: &[u8]) -> Result<()> {
        let loc = self.locate(key)?;
        check_range(loc, offset, data.len() as u64)?;
        self.pmem.write_persist(loc.offset + offset, data)
    }

    fn allocate_memory(&mut self, size: u64) -> Result<u64> {
        if size == 0 || size > MAX_VALUE {
            return Err(Error::Invalid(format!("allocation of {size} bytes")));
        }
        let off = self.alloc.alloc(size)?;
        self.blocks.insert(off, size);
        Ok(off)
    }

    fn free_memory(&mut self, offset: u64, _size: u64) -> Result<()> {
        let size = self.blocks.remove(&offset).ok_or(Error::BadFree(offset))?;
        self.alloc.free(offset, size)
    }

    fn iterate(&self) -> Result<Vec<(Vec<u8>, ValueLoc, u32)>> {
        Ok(self.map.iter().map(|(k, &(loc, t))| (k.clone(), loc, t)).collect())
    }

    fn count(&self) -> u64 {
        self.map.len() as u64
    }

    fn attributes(&self, key: &[u8]) -> Result<Attributes> {
        let (loc, t) = self.lookup(key)?;
        Ok(Attributes { value_len: loc.len, write_time: t })
    }

    fn pool_info(&self) -> PoolInfo {
        PoolInfo {
            size: self.extents.iter().map(|e| e.1).sum(),
            free_bytes: self.alloc.free_bytes(),
            count: self.map.len() as u64,
        }
    }

    fn extents(&self) -> &[(u64, u64)] {
        &self.extents
    }
}
