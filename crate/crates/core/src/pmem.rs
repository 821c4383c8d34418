//! Flushable byte space backing one shard.
//!
//! Two backends sit behind [`Pmem`]:
//!
//! * a memory-mapped file (the fs-DAX stand-in), where `persist` is `msync`;
//! * a crash simulator that keeps a *committed* image next to the live one and
//!   tracks which 64-byte lines were written but not yet flushed. A crash
//!   state is the committed image plus any subset of those pending lines.
//!
//! Images are page-granular copy-on-write, so snapshotting a 128 MiB arena
//! costs a vector of page pointers, not a memcpy.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memmap2::MmapMut;
use parking_lot::Mutex;
use rand::Rng;

use crate::error::{Error, Result};

/// Persistence granularity of the crash simulator.
pub const LINE: u64 = 64;
const PAGE: usize = 4096;

#[derive(Clone)]
struct Page([u8; PAGE]);

/// Sparse copy-on-write byte image. Untouched pages read as zero.
#[derive(Clone)]
pub struct Image {
    pages: Vec<Option<Arc<Page>>>,
    len: u64,
}

impl Image {
    pub fn zeroed(len: u64) -> Self {
        let n = len.div_ceil(PAGE as u64) as usize;
        Self { pages: vec![None; n], len }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of pages holding data.
    pub fn resident_pages(&self) -> usize {
        self.pages.iter().filter(|p| p.is_some()).count()
    }

    pub fn read(&self, mut offset: u64, mut buf: &mut [u8]) {
        while !buf.is_empty() {
            let page = (offset / PAGE as u64) as usize;
            let within = (offset % PAGE as u64) as usize;
            let n = (PAGE - within).min(buf.len());
            match &self.pages[page] {
                Some(p) => buf[..n].copy_from_slice(&p.0[within..within + n]),
                None => buf[..n].fill(0),
            }
            offset += n as u64;
            buf = &mut buf[n..];
        }
    }

    pub fn write(&mut self, mut offset: u64, mut data: &[u8]) {
        while !data.is_empty() {
            let page = (offset / PAGE as u64) as usize;
            let within = (offset % PAGE as u64) as usize;
            let n = (PAGE - within).min(data.len());
            let chunk = &data[..n];
            let slot = &mut self.pages[page];
            if slot.is_none() && chunk.iter().all(|&b| b == 0) {
                // zero onto an absent page is a no-op
            } else {
                let p = slot.get_or_insert_with(|| Arc::new(Page([0; PAGE])));
                Arc::make_mut(p).0[within..within + n].copy_from_slice(chunk);
            }
            offset += n as u64;
            data = &data[n..];
        }
    }

    fn line(&self, line: u64) -> [u8; LINE as usize] {
        let mut out = [0u8; LINE as usize];
        self.read(line * LINE, &mut out);
        out
    }

    /// Byte-wise equality over the whole image.
    pub fn same_bytes(&self, other: &Image) -> bool {
        if self.len != other.len {
            return false;
        }
        self.pages.iter().zip(&other.pages).all(|(a, b)| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b) || a.0 == b.0,
            (Some(p), None) | (None, Some(p)) => p.0.iter().all(|&x| x == 0),
        })
    }
}

/// One instant at which a crash may be injected: the flushed image plus the
/// lines that were dirty at that instant (with their in-cache contents).
#[derive(Clone)]
pub struct CrashPoint {
    pub committed: Image,
    pub pending: Vec<(u64, [u8; LINE as usize])>,
}

impl CrashPoint {
    /// Materialize the crash state that keeps exactly the pending lines whose
    /// bit is set in `mask` (bit i ↔ `pending[i]`).
    pub fn materialize_mask(&self, mask: &[bool]) -> Image {
        let mut img = self.committed.clone();
        for ((line, data), keep) in self.pending.iter().zip(mask) {
            if *keep {
                img.write(line * LINE, data);
            }
        }
        img
    }

    pub fn materialize_random<R: Rng + ?Sized>(&self, rng: &mut R) -> Image {
        let mask: Vec<bool> = self.pending.iter().map(|_| rng.random_bool(0.5)).collect();
        self.materialize_mask(&mask)
    }
}

struct CrashSim {
    live: Image,
    committed: Image,
    pending: BTreeSet<u64>,
    recording: Option<Vec<CrashPoint>>,
}

impl CrashSim {
    fn point(&self) -> CrashPoint {
        CrashPoint {
            committed: self.committed.clone(),
            pending: self.pending.iter().map(|&l| (l, self.live.line(l))).collect(),
        }
    }

    fn mark_dirty(&mut self, offset: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = offset / LINE;
        let last = (offset + len - 1) / LINE;
        self.pending.extend(first..=last);
    }

    fn flush(&mut self, offset: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = offset / LINE;
        let last = (offset + len - 1) / LINE;
        if self.recording.is_some() && self.pending.range(first..=last).next().is_some() {
            let p = self.point();
            self.recording.as_mut().unwrap().push(p);
        }
        let lines: Vec<u64> = self.pending.range(first..=last).copied().collect();
        for l in lines {
            let data = self.live.line(l);
            self.committed.write(l * LINE, &data);
            self.pending.remove(&l);
        }
    }
}

enum Backend {
    Mapped { map: MmapMut, path: PathBuf },
    Sim(CrashSim),
}

/// Shared handle onto one arena's bytes. Cloning shares the same memory.
#[derive(Clone)]
pub struct Pmem {
    inner: Arc<Mutex<Backend>>,
    capacity: u64,
}

impl std::fmt::Debug for Pmem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pmem").field("capacity", &self.capacity).field("crash_sim", &self.is_crash_sim()).finish()
    }
}

impl Pmem {
    /// Fresh crash-simulating memory of `capacity` zero bytes.
    pub fn crash_sim(capacity: u64) -> Self {
        Self::from_image(Image::zeroed(capacity))
    }

    /// Crash-simulating memory whose flushed and live state is `image`
    /// (the state a machine would find on restart).
    pub fn from_image(image: Image) -> Self {
        let capacity = image.len();
        let sim = CrashSim {
            live: image.clone(),
            committed: image,
            pending: BTreeSet::new(),
            recording: None,
        };
        Self { inner: Arc::new(Mutex::new(Backend::Sim(sim))), capacity }
    }

    /// Map `path`, creating it with `capacity` bytes if absent. Returns the
    /// handle and whether the file already existed.
    pub fn map_file(path: &Path, capacity: u64) -> Result<(Self, bool)> {
        let existed = path.exists();
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
        let len = file.metadata()?.len();
        let capacity = if existed && len > 0 { len } else { capacity };
        if len != capacity {
            file.set_len(capacity)?;
        }
        // SAFETY: the arena file is owned by this shard; other mappers (ADO
        // processes) only touch pool extents under the shard's key locks.
        let map = unsafe { MmapMut::map_mut(&file)? };
        let backend = Backend::Mapped { map, path: path.to_path_buf() };
        Ok((Self { inner: Arc::new(Mutex::new(backend)), capacity }, existed && len > 0))
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn is_crash_sim(&self) -> bool {
        matches!(&*self.inner.lock(), Backend::Sim(_))
    }

    pub fn path(&self) -> Option<PathBuf> {
        match &*self.inner.lock() {
            Backend::Mapped { path, .. } => Some(path.clone()),
            Backend::Sim(_) => None,
        }
    }

    #[inline]
    fn check(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(Error::Range { offset, len }),
        }
    }

    pub fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check(offset, buf.len() as u64)?;
        match &*self.inner.lock() {
            Backend::Mapped { map, .. } => {
                let o = offset as usize;
                buf.copy_from_slice(&map[o..o + buf.len()]);
            }
            Backend::Sim(s) => s.live.read(offset, buf),
        }
        Ok(())
    }

    pub fn read_vec(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut v = vec![0u8; len as usize];
        self.read(offset, &mut v)?;
        Ok(v)
    }

    pub fn write(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.check(offset, data.len() as u64)?;
        match &mut *self.inner.lock() {
            Backend::Mapped { map, .. } => {
                let o = offset as usize;
                map[o..o + data.len()].copy_from_slice(data);
            }
            Backend::Sim(s) => {
                s.live.write(offset, data);
                s.mark_dirty(offset, data.len() as u64);
            }
        }
        Ok(())
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Aligned 64-bit store, the only write assumed atomic.
    pub fn write_u64(&self, offset: u64, v: u64) -> Result<()> {
        debug_assert_eq!(offset % 8, 0, "unaligned 64-bit store");
        self.write(offset, &v.to_le_bytes())
    }

    pub fn zero(&self, offset: u64, len: u64) -> Result<()> {
        self.check(offset, len)?;
        match &mut *self.inner.lock() {
            Backend::Mapped { map, .. } => map[offset as usize..(offset + len) as usize].fill(0),
            Backend::Sim(s) => {
                // Lines on pages that are zero in both images cannot change,
                // so only resident pages are written and marked dirty.
                let zeros = [0u8; PAGE];
                let end = offset + len;
                let mut o = offset;
                while o < end {
                    let page = (o / PAGE as u64) as usize;
                    let n = (PAGE as u64 - o % PAGE as u64).min(end - o);
                    if s.live.pages[page].is_some() || s.committed.pages[page].is_some() {
                        s.live.write(o, &zeros[..n as usize]);
                        s.mark_dirty(o, n);
                    }
                    o += n;
                }
            }
        }
        Ok(())
    }

    /// Make `[offset, offset+len)` durable.
    pub fn persist(&self, offset: u64, len: u64) -> Result<()> {
        self.check(offset, len)?;
        match &mut *self.inner.lock() {
            Backend::Mapped { map, .. } => {
                if len > 0 {
                    map.flush_range(offset as usize, len as usize)?;
                }
            }
            Backend::Sim(s) => s.flush(offset, len),
        }
        Ok(())
    }

    pub fn write_persist(&self, offset: u64, data: &[u8]) -> Result<()> {
        self.write(offset, data)?;
        self.persist(offset, data.len() as u64)
    }

    pub fn write_u64_persist(&self, offset: u64, v: u64) -> Result<()> {
        self.write_u64(offset, v)?;
        self.persist(offset, 8)
    }

    /// Start capturing a [`CrashPoint`] before every flush that retires dirty
    /// lines. No-op on the mapped backend.
    pub fn start_recording(&self) {
        if let Backend::Sim(s) = &mut *self.inner.lock() {
            s.recording = Some(Vec::new());
        }
    }

    /// Stop recording and return the captured points, followed by the state
    /// at the moment of the call.
    pub fn take_recording(&self) -> Vec<CrashPoint> {
        match &mut *self.inner.lock() {
            Backend::Sim(s) => {
                let mut pts = s.recording.take().unwrap_or_default();
                pts.push(s.point());
                pts
            }
            Backend::Mapped { .. } => Vec::new(),
        }
    }

    /// The crash state at this instant with a random subset of dirty lines
    /// surviving. `None` on the mapped backend.
    pub fn crash_now<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Image> {
        match &*self.inner.lock() {
            Backend::Sim(s) => Some(s.point().materialize_random(rng)),
            Backend::Mapped { .. } => None,
        }
    }

    /// Current crash point (flushed image + dirty lines).
    pub fn crash_point(&self) -> Option<CrashPoint> {
        match &*self.inner.lock() {
            Backend::Sim(s) => Some(s.point()),
            Backend::Mapped { .. } => None,
        }
    }

    /// Live bytes as an image (crash-sim only).
    pub fn live_image(&self) -> Option<Image> {
        match &*self.inner.lock() {
            Backend::Sim(s) => Some(s.live.clone()),
            Backend::Mapped { .. } => None,
        }
    }

    pub fn pending_lines(&self) -> usize {
        match &*self.inner.lock() {
            Backend::Sim(s) => s.pending.len(),
            Backend::Mapped { .. } => 0,
        }
    }
}

/// Bounded window onto arena memory, addressed by absolute arena offsets.
/// This is how plugins and pool-scoped code see memory: every access outside
/// the listed extents fails.
pub trait MemoryView: Send {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()>;
    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()>;
    fn persist(&mut self, offset: u64, len: u64) -> Result<()>;

    fn read_u64(&self, offset: u64) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn write_u64(&mut self, offset: u64, v: u64) -> Result<()> {
        self.write(offset, &v.to_le_bytes())
    }

    fn read_vec(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut v = vec![0u8; len as usize];
        self.read(offset, &mut v)?;
        Ok(v)
    }
}

/// [`MemoryView`] over a shared [`Pmem`], restricted to a set of extents.
#[derive(Clone, Debug)]
pub struct ExtentView {
    pmem: Pmem,
    extents: Vec<(u64, u64)>,
}

impl ExtentView {
    pub fn new(pmem: Pmem, extents: Vec<(u64, u64)>) -> Self {
        Self { pmem, extents }
    }

    pub fn extents(&self) -> &[(u64, u64)] {
        &self.extents
    }

    pub fn covers(&self, offset: u64, len: u64) -> bool {
        let Some(end) = offset.checked_add(len) else { return false };
        self.extents.iter().any(|&(b, l)| offset >= b && end <= b + l)
    }

    fn check(&self, offset: u64, len: u64) -> Result<()> {
        if self.covers(offset, len) {
            Ok(())
        } else {
            Err(Error::Range { offset, len })
        }
    }
}

impl MemoryView for ExtentView {
    fn read(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.check(offset, buf.len() as u64)?;
        self.pmem.read(offset, buf)
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<()> {
        self.check(offset, data.len() as u64)?;
        self.pmem.write(offset, data)
    }

    fn persist(&mut self, offset: u64, len: u64) -> Result<()> {
        self.check(offset, len)?;
        self.pmem.persist(offset, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn image_cow_and_zero_pages() {
        let mut a = Image::zeroed(1 << 20);
        a.write(100, &[0u8; 5000]);
        assert_eq!(a.resident_pages(), 0);
        a.write(4090, b"hello world");
        assert_eq!(a.resident_pages(), 2);
        let b = a.clone();
        a.write(4090, b"HELLO");
        let mut buf = [0u8; 11];
        b.read(4090, &mut buf);
        assert_eq!(&buf, b"hello world");
        a.read(4090, &mut buf);
        assert_eq!(&buf, b"HELLO world");
    }

    #[test]
    fn persisted_bytes_survive_every_crash() {
        let pm = Pmem::crash_sim(1 << 20);
        pm.write(128, &[7u8; 64]).unwrap();
        pm.persist(128, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..32 {
            let img = pm.crash_now(&mut rng).unwrap();
            let mut b = [0u8; 64];
            img.read(128, &mut b);
            assert_eq!(b, [7u8; 64]);
        }
    }

    #[test]
    fn unpersisted_bytes_may_or_may_not_survive() {
        let pm = Pmem::crash_sim(1 << 20);
        pm.write(128, &[7u8; 64]).unwrap();
        let pt = pm.crash_point().unwrap();
        assert_eq!(pt.pending.len(), 1);
        let kept = pt.materialize_mask(&[true]);
        let dropped = pt.materialize_mask(&[false]);
        let mut b = [0u8; 64];
        kept.read(128, &mut b);
        assert_eq!(b, [7u8; 64]);
        dropped.read(128, &mut b);
        assert_eq!(b, [0u8; 64]);
    }

    #[test]
    fn persist_out_of_range() {
        let pm = Pmem::crash_sim(1 << 20);
        assert!(matches!(pm.persist(1 << 20, 1), Err(Error::Range { .. })));
        assert!(matches!(pm.write(u64::MAX, &[1]), Err(Error::Range { .. })));
    }

    #[test]
    fn recording_captures_points_before_flushes() {
        let pm = Pmem::crash_sim(1 << 20);
        pm.start_recording();
        pm.write_u64(0, 1).unwrap();
        pm.persist(0, 8).unwrap();
        pm.write_u64(64, 2).unwrap();
        pm.persist(64, 8).unwrap();
        pm.persist(64, 8).unwrap(); // nothing dirty: no point
        let pts = pm.take_recording();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].pending.len(), 1);
        assert!(pts[2].pending.is_empty());
    }

    #[test]
    fn extent_view_rejects_outside() {
        let pm = Pmem::crash_sim(1 << 20);
        let mut v = ExtentView::new(pm, vec![(4096, 4096)]);
        v.write(4096, b"ok").unwrap();
        assert!(v.write(8190, b"xyz").is_err());
        assert!(v.read_u64(0).is_err());
    }

    #[test]
    fn mapped_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arena");
        {
            let (pm, existed) = Pmem::map_file(&path, 1 << 20).unwrap();
            assert!(!existed);
            pm.write_persist(10, b"persisted").unwrap();
        }
        let (pm, existed) = Pmem::map_file(&path, 1 << 20).unwrap();
        assert!(existed);
        assert_eq!(pm.read_vec(10, 9).unwrap(), b"persisted");
    }
}
