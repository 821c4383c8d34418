//! User-level IPC: a pair of single-producer/single-consumer rings in one
//! shared-memory segment, one ring per direction.
//!
//! Segment layout:
//!
//! ```text
//! 0       magic "UIPC0001"
//! 64      closed flag (set by either side on shutdown)
//! 4096    ring shard -> ADO
//! 4096+R  ring ADO -> shard          R = 256 + 64 * 4096
//! ```
//!
//! Each ring has its head (next slot to write) at +0 and tail (next slot to
//! read) at +64, and 64 slots of 4 KiB from +256. A slot holds
//! `u32 len, u32 flags` and up to [`SLOT_PAYLOAD`] bytes. Sending and
//! receiving are plain loads and stores with acquire/release ordering; only
//! an empty or full ring makes a caller back off.
//!
//! [`Producer::try_send`] moves one slot-sized message. [`Producer::send`]
//! fragments larger messages across consecutive slots (flag `MORE`) and
//! waits for the consumer when the ring fills.

use std::fs::OpenOptions;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use memmap2::MmapMut;

use crate::{AdoError, Result};

pub const SLOTS: u64 = 64;
pub const SLOT_SIZE: usize = 4096;
pub const SLOT_PAYLOAD: usize = SLOT_SIZE - 8;
const QUEUE_MAGIC: u64 = u64::from_le_bytes(*b"UIPC0001");
const QUEUE_HEADER: usize = 4096;
const RING_HEADER: usize = 256;
const RING_BYTES: usize = RING_HEADER + SLOTS as usize * SLOT_SIZE;
pub const SEGMENT_BYTES: usize = QUEUE_HEADER + 2 * RING_BYTES;
/// Upper bound on a reassembled message.
pub const MAX_MESSAGE: usize = (1 << 30) + (1 << 20);
const FLAG_MORE: u32 = 1;

enum Backing {
    Heap(#[allow(dead_code)] Box<[u64]>),
    Map(#[allow(dead_code)] MmapMut),
}

struct Segment {
    _backing: Backing,
    base: *mut u8,
}

// SAFETY: all shared words are accessed through atomics; slot bytes are
// handed over with release/acquire on head and tail.
unsafe impl Send for Segment {}
unsafe impl Sync for Segment {}

impl Segment {
    fn word(&self, off: usize) -> &AtomicU64 {
        debug_assert!(off % 8 == 0 && off + 8 <= SEGMENT_BYTES);
        // SAFETY: in bounds and 8-aligned (the base is page or u64 aligned).
        unsafe { &*(self.base.add(off) as *const AtomicU64) }
    }

    fn slot(&self, ring: usize, idx: u64) -> *mut u8 {
        let off = ring + RING_HEADER + (idx % SLOTS) as usize * SLOT_SIZE;
        // SAFETY: slot offsets stay inside the segment.
        unsafe { self.base.add(off) }
    }
}

/// One shared segment. Either side can build its [`Endpoint`] from it.
#[derive(Clone)]
pub struct Queue {
    seg: Arc<Segment>,
}

impl std::fmt::Debug for Queue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Queue").field("closed", &self.is_closed()).finish()
    }
}

const TO_ADO: usize = QUEUE_HEADER;
const TO_SHARD: usize = QUEUE_HEADER + RING_BYTES;

impl Queue {
    /// Segment in private memory, for an ADO hosted on a thread.
    pub fn in_memory() -> Self {
        let mut words = vec![0u64; SEGMENT_BYTES / 8].into_boxed_slice();
        let base = words.as_mut_ptr() as *mut u8;
        let q = Self { seg: Arc::new(Segment { _backing: Backing::Heap(words), base }) };
        q.seg.word(0).store(QUEUE_MAGIC, Ordering::Release);
        q
    }

    /// Create (or reset) a file-backed segment.
    pub fn create_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| AdoError::Launch(format!("{}: {e}", path.display())))?;
        file.set_len(SEGMENT_BYTES as u64).map_err(|e| AdoError::Launch(e.to_string()))?;
        let q = Self::map(&file)?;
        q.seg.word(0).store(QUEUE_MAGIC, Ordering::Release);
        Ok(q)
    }

    /// Attach to a segment created by the other side.
    pub fn open_file(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| AdoError::Launch(format!("{}: {e}", path.display())))?;
        if file.metadata().map(|m| m.len()).unwrap_or(0) != SEGMENT_BYTES as u64 {
            return Err(AdoError::Launch(format!("{} is not a queue segment", path.display())));
        }
        let q = Self::map(&file)?;
        if q.seg.word(0).load(Ordering::Acquire) != QUEUE_MAGIC {
            return Err(AdoError::Launch(format!("{} has a bad queue magic", path.display())));
        }
        Ok(q)
    }

    fn map(file: &std::fs::File) -> Result<Self> {
        // SAFETY: the segment is only shared with the peer process, and every
        // cross-process access goes through the ring protocol.
        let mut map = unsafe { MmapMut::map_mut(file) }.map_err(|e| AdoError::Launch(e.to_string()))?;
        let base = map.as_mut_ptr();
        Ok(Self { seg: Arc::new(Segment { _backing: Backing::Map(map), base }) })
    }

    pub fn shard_end(&self) -> Endpoint {
        Endpoint::new(self.clone(), TO_ADO, TO_SHARD)
    }

    pub fn ado_end(&self) -> Endpoint {
        Endpoint::new(self.clone(), TO_SHARD, TO_ADO)
    }

    pub fn close(&self) {
        self.seg.word(64).store(1, Ordering::Release);
    }

    pub fn is_closed(&self) -> bool {
        self.seg.word(64).load(Ordering::Acquire) != 0
    }
}

pub struct Producer {
    q: Queue,
    ring: usize,
}

impl Producer {
    fn head(&self) -> &AtomicU64 {
        self.q.seg.word(self.ring)
    }

    fn tail(&self) -> &AtomicU64 {
        self.q.seg.word(self.ring + 64)
    }

    fn push(&self, chunk: &[u8], more: bool) -> bool {
        let head = self.head().load(Ordering::Relaxed);
        if head - self.tail().load(Ordering::Acquire) >= SLOTS {
            return false;
        }
        let p = self.q.seg.slot(self.ring, head);
        // SAFETY: the consumer does not touch this slot until head moves.
        unsafe {
            std::ptr::copy_nonoverlapping((chunk.len() as u32).to_le_bytes().as_ptr(), p, 4);
            let flags: u32 = if more { FLAG_MORE } else { 0 };
            std::ptr::copy_nonoverlapping(flags.to_le_bytes().as_ptr(), p.add(4), 4);
            std::ptr::copy_nonoverlapping(chunk.as_ptr(), p.add(8), chunk.len());
        }
        self.head().store(head + 1, Ordering::Release);
        true
    }

    /// Send a message that fits one slot without waiting.
    pub fn try_send(&self, msg: &[u8]) -> Result<()> {
        if msg.len() > SLOT_PAYLOAD {
            return Err(AdoError::TooLarge(msg.len()));
        }
        if self.push(msg, false) {
            Ok(())
        } else {
            Err(AdoError::QueueFull)
        }
    }

    /// Send a message of any size, waiting for free slots. `alive` is
    /// polled while waiting; once it returns false the send gives up.
    pub fn send(&self, msg: &[u8], alive: &mut dyn FnMut() -> bool) -> Result<()> {
        if msg.len() > MAX_MESSAGE {
            return Err(AdoError::TooLarge(msg.len()));
        }
        let mut chunks = msg.chunks(SLOT_PAYLOAD).peekable();
        if msg.is_empty() {
            return self.wait_push(&[], false, alive);
        }
        while let Some(c) = chunks.next() {
            self.wait_push(c, chunks.peek().is_some(), alive)?;
        }
        Ok(())
    }

    fn wait_push(&self, chunk: &[u8], more: bool, alive: &mut dyn FnMut() -> bool) -> Result<()> {
        let mut b = Backoff::default();
        while !self.push(chunk, more) {
            if self.q.is_closed() || !alive() {
                return Err(AdoError::Disconnected);
            }
            b.wait();
        }
        Ok(())
    }
}

pub struct Consumer {
    q: Queue,
    ring: usize,
    partial: Vec<u8>,
}

impl Consumer {
    fn pop(&mut self) -> Result<Option<bool>> {
        let tail = self.q.seg.word(self.ring + 64).load(Ordering::Relaxed);
        if tail == self.q.seg.word(self.ring).load(Ordering::Acquire) {
            return Ok(None);
        }
        let p = self.q.seg.slot(self.ring, tail);
        let mut hdr = [0u8; 8];
        // SAFETY: the producer published this slot before moving head.
        unsafe { std::ptr::copy_nonoverlapping(p, hdr.as_mut_ptr(), 8) };
        let len = u32::from_le_bytes(hdr[..4].try_into().expect("4")) as usize;
        let flags = u32::from_le_bytes(hdr[4..].try_into().expect("4"));
        if len > SLOT_PAYLOAD || self.partial.len() + len > MAX_MESSAGE {
            return Err(AdoError::Malformed(format!("slot length {len}")));
        }
        let at = self.partial.len();
        self.partial.resize(at + len, 0);
        // SAFETY: as above; `len` was bounds-checked.
        unsafe { std::ptr::copy_nonoverlapping(p.add(8), self.partial[at..].as_mut_ptr(), len) };
        self.q.seg.word(self.ring + 64).store(tail + 1, Ordering::Release);
        Ok(Some(flags & FLAG_MORE != 0))
    }

    /// Next complete message, if one has fully arrived.
    pub fn try_recv(&mut self) -> Result<Option<Vec<u8>>> {
        while let Some(more) = self.pop()? {
            if !more {
                return Ok(Some(std::mem::take(&mut self.partial)));
            }
        }
        Ok(None)
    }

    /// Wait for the next message. Fails once the queue is closed or `alive`
    /// returns false.
    pub fn recv(&mut self, alive: &mut dyn FnMut() -> bool) -> Result<Vec<u8>> {
        let mut b = Backoff::default();
        loop {
            if let Some(m) = self.try_recv()? {
                return Ok(m);
            }
            if self.q.is_closed() || !alive() {
                return Err(AdoError::Disconnected);
            }
            b.wait();
        }
    }

    /// Like [`Consumer::recv`] but gives up after `timeout`.
    pub fn recv_timeout(&mut self, timeout: Duration, alive: &mut dyn FnMut() -> bool) -> Result<Option<Vec<u8>>> {
        let deadline = std::time::Instant::now() + timeout;
        let mut b = Backoff::default();
        loop {
            if let Some(m) = self.try_recv()? {
                return Ok(Some(m));
            }
            if self.q.is_closed() || !alive() {
                return Err(AdoError::Disconnected);
            }
            if std::time::Instant::now() >= deadline {
                return Ok(None);
            }
            b.wait();
        }
    }
}

/// One side's view: it produces into one ring and consumes the other.
pub struct Endpoint {
    pub tx: Producer,
    pub rx: Consumer,
}

impl Endpoint {
    fn new(q: Queue, tx: usize, rx: usize) -> Self {
        Self { tx: Producer { q: q.clone(), ring: tx }, rx: Consumer { q, ring: rx, partial: Vec::new() } }
    }

    pub fn queue(&self) -> &Queue {
        &self.tx.q
    }
}

/// Spin, then yield, then sleep in growing steps.
#[derive(Default)]
struct Backoff(u32);

impl Backoff {
    fn wait(&mut self) {
        self.0 += 1;
        match self.0 {
            0..=64 => std::hint::spin_loop(),
            65..=128 => std::thread::yield_now(),
            n => std::thread::sleep(Duration::from_micros(((n - 128) as u64 * 10).min(200))),
        }
    }
}
