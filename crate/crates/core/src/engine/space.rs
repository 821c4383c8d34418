//! Transactional memory spaces the hash table runs on.
//!
//! A [`Space`] couples an undo log with a payload allocator. Everything
//! recorded or allocated since the last commit becomes permanent at
//! [`Space::commit`] or disappears at [`Space::rollback`].

use crate::cc_heap::{CcHeap, UndoLog};
use crate::error::Result;
use crate::pmem::Pmem;
use crate::recon_alloc::ReconAllocator;

pub trait Space: Send + std::fmt::Debug {
    fn pmem(&self) -> &Pmem;
    fn record(&mut self, offset: u64, len: u64) -> Result<()>;
    fn alloc(&mut self, size: u64) -> Result<u64>;
    fn free(&mut self, offset: u64, size: u64) -> Result<()>;
    fn commit(&mut self) -> Result<()>;
    fn rollback(&mut self) -> Result<()>;
    fn free_bytes(&self) -> u64;
}

/// Run `f` as one transaction: commit on success, roll back on error.
pub fn atomically<S: Space + ?Sized, R>(space: &mut S, f: impl FnOnce(&mut S) -> Result<R>) -> Result<R> {
    match f(space) {
        Ok(r) => {
            space.commit()?;
            Ok(r)
        }
        Err(e) => {
            space.rollback()?;
            Err(e)
        }
    }
}

/// Pool undo log plus a DRAM allocator that is reconstituted on restart.
/// Frees are held back until commit so a rollback never references
/// recycled memory.
#[derive(Debug)]
pub struct VolatileSpace {
    pmem: Pmem,
    log: UndoLog,
    alloc: ReconAllocator,
    tx_allocs: Vec<(u64, u64)>,
    tx_frees: Vec<(u64, u64)>,
}

impl VolatileSpace {
    pub fn new(pmem: Pmem, log: UndoLog, alloc: ReconAllocator) -> Self {
        Self { pmem, log, alloc, tx_allocs: Vec::new(), tx_frees: Vec::new() }
    }

    pub fn allocator(&self) -> &ReconAllocator {
        &self.alloc
    }
}

impl Space for VolatileSpace {
    fn pmem(&self) -> &Pmem {
        &self.pmem
    }

    fn record(&mut self, offset: u64, len: u64) -> Result<()> {
        self.log.record(offset, len)
    }

    fn alloc(&mut self, size: u64) -> Result<u64> {
        let o = self.alloc.alloc(size)?;
        self.tx_allocs.push((o, size));
        Ok(o)
    }

    fn free(&mut self, offset: u64, size: u64) -> Result<()> {
        self.tx_frees.push((offset, size));
        Ok(())
    }

    fn commit(&mut self) -> Result<()> {
        self.log.commit()?;
        self.tx_allocs.clear();
        for (o, s) in std::mem::take(&mut self.tx_frees) {
            self.alloc.free(o, s)?;
        }
        Ok(())
    }

    fn rollback(&mut self) -> Result<()> {
        self.log.rollback()?;
        self.tx_frees.clear();
        for (o, s) in std::mem::take(&mut self.tx_allocs) {
            self.alloc.free(o, s)?;
        }
        Ok(())
    }

    fn free_bytes(&self) -> u64 {
        self.alloc.free_bytes()
    }
}

/// Crash-consistent heap; allocator metadata is itself undo-logged.
#[derive(Debug)]
pub struct CcSpace {
    heap: CcHeap,
}

impl CcSpace {
    pub fn new(heap: CcHeap) -> Self {
        Self { heap }
    }

    pub fn heap(&self) -> &CcHeap {
        &self.heap
    }

    pub fn heap_mut(&mut self) -> &mut CcHeap {
        &mut self.heap
    }
}

impl Space for CcSpace {
    fn pmem(&self) -> &Pmem {
        self.heap.pmem()
    }

    fn record(&mut self, offset: u64, len: u64) -> Result<()> {
        self.heap.record(offset, len)
    }

    fn alloc(&mut self, size: u64) -> Result<u64> {
        self.heap.alloc(size)
    }

    fn free(&mut self, offset: u64, _size: u64) -> Result<()> {
        self.heap.free(offset)
    }

    fn commit(&mut self) -> Result<()> {
        self.heap.commit()
    }

    fn rollback(&mut self) -> Result<()> {
        self.heap.rollback()
    }

    fn free_bytes(&self) -> u64 {
        self.heap.free_bytes()
    }
}
