//! The per-key root that holds the version ring.
//!
//! Layout, in little-endian u64 words from the start of the key's value:
//!
//! ```text
//! 0            capacity (ring length; 0 until the root is initialised)
//! 1            current slot (where the next version goes)
//! 2            undo: mid-transaction flag
//! 3..=6        undo: slot, value offset, value length, timestamp
//! 7 + 3i ..    slot i: value offset, value length, timestamp
//! ```
//!
//! A value offset of 0 marks an empty slot; offset 0 holds the arena header
//! so no value can live there. A zeroed root is a valid empty root, which
//! covers a crash between key creation and initialisation.

use mcaslite_ado::{AdoError, Context};

const CAPACITY: u64 = 0;
const CURRENT: u64 = 1;
const MID_TX: u64 = 2;
const UNDO: u64 = 3;
const SLOTS: u64 = 7;

/// Root bytes needed for a ring of `n` versions.
pub const fn root_size(n: u64) -> u64 {
    8 * (SLOTS + 3 * n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Version {
    pub offset: u64,
    pub len: u64,
    pub timestamp: u64,
}

impl Version {
    pub fn is_empty(&self) -> bool {
        self.offset == 0
    }
}

/// A root at `base` in pool memory. All access goes through the plugin
/// context, so out-of-pool roots fault instead of scribbling.
#[derive(Clone, Copy, Debug)]
pub struct VersionRoot {
    base: u64,
    len: u64,
}

type R<T> = Result<T, AdoError>;

impl VersionRoot {
    pub fn new(base: u64, len: u64) -> Self {
        Self { base, len }
    }

    fn word(&self, i: u64) -> u64 {
        self.base + 8 * i
    }

    fn get(&self, ctx: &Context<'_>, i: u64) -> R<u64> {
        ctx.read_u64(self.word(i))
    }

    fn put(&self, ctx: &mut Context<'_>, i: u64, v: u64) -> R<()> {
        ctx.write_u64(self.word(i), v)
    }

    fn persist(&self, ctx: &mut Context<'_>, from: u64, words: u64) -> R<()> {
        ctx.persist(self.word(from), 8 * words)
    }

    fn write_version(&self, ctx: &mut Context<'_>, at: u64, v: Version) -> R<()> {
        self.put(ctx, at, v.offset)?;
        self.put(ctx, at + 1, v.len)?;
        self.put(ctx, at + 2, v.timestamp)?;
        self.persist(ctx, at, 3)
    }

    fn read_version(&self, ctx: &Context<'_>, at: u64) -> R<Version> {
        Ok(Version { offset: self.get(ctx, at)?, len: self.get(ctx, at + 1)?, timestamp: self.get(ctx, at + 2)? })
    }

    pub fn capacity(&self, ctx: &Context<'_>) -> R<u64> {
        self.get(ctx, CAPACITY)
    }

    /// Zero the root and set its ring length.
    pub fn init(&self, ctx: &mut Context<'_>, capacity: u64) -> R<()> {
        if capacity == 0 || root_size(capacity) > self.len {
            return Err(AdoError::Malformed(format!(
                "a ring of {capacity} versions needs a {} byte root, have {}",
                root_size(capacity),
                self.len
            )));
        }
        ctx.write_persist(self.base, &vec![0; root_size(capacity) as usize])?;
        self.put(ctx, CAPACITY, capacity)?;
        self.persist(ctx, CAPACITY, 1)
    }

    /// Bring the root to a consistent state: initialise it if it never
    /// was, and roll back an interrupted [`add_version`](Self::add_version).
    pub fn open(&self, ctx: &mut Context<'_>, capacity: u64) -> R<u64> {
        let n = self.capacity(ctx)?;
        if n == 0 {
            self.init(ctx, capacity)?;
            return Ok(capacity);
        }
        if root_size(n) > self.len {
            return Err(AdoError::Malformed(format!("root of {} bytes claims {n} versions", self.len)));
        }
        if self.get(ctx, MID_TX)? != 0 {
            let slot = self.get(ctx, UNDO)?;
            let old = self.read_version(ctx, UNDO + 1)?;
            self.write_version(ctx, SLOTS + 3 * slot, old)?;
            self.put(ctx, CURRENT, slot)?;
            self.persist(ctx, CURRENT, 1)?;
            self.put(ctx, MID_TX, 0)?;
            self.persist(ctx, MID_TX, 1)?;
        }
        Ok(n)
    }

    /// Link `v` as the newest version. Returns the version it displaced,
    /// which the caller frees once this returns.
    pub fn add_version(&self, ctx: &mut Context<'_>, v: Version) -> R<Version> {
        let n = self.capacity(ctx)?;
        let cur = self.get(ctx, CURRENT)?;
        let at = SLOTS + 3 * cur;
        let old = self.read_version(ctx, at)?;

        // undo record first, then the flag that arms it
        self.put(ctx, UNDO, cur)?;
        self.write_version(ctx, UNDO + 1, old)?;
        self.persist(ctx, UNDO, 1)?;
        self.put(ctx, MID_TX, 1)?;
        self.persist(ctx, MID_TX, 1)?;

        self.write_version(ctx, at, v)?;
        self.put(ctx, CURRENT, (cur + 1) % n)?;
        self.persist(ctx, CURRENT, 1)?;

        self.put(ctx, MID_TX, 0)?;
        self.persist(ctx, MID_TX, 1)?;
        Ok(old)
    }

    /// Version `index` (0 = newest, -k = k back), if still retained.
    pub fn get_version(&self, ctx: &Context<'_>, index: i64) -> R<Option<Version>> {
        let n = self.capacity(ctx)?;
        if index > 0 || n == 0 || index.unsigned_abs() >= n {
            return Ok(None);
        }
        let cur = self.get(ctx, CURRENT)?;
        let slot = (cur + n - 1 - index.unsigned_abs()) % n;
        let v = self.read_version(ctx, SLOTS + 3 * slot)?;
        Ok((!v.is_empty()).then_some(v))
    }

    /// Retained versions, oldest first.
    pub fn history(&self, ctx: &Context<'_>) -> R<Vec<Version>> {
        let n = self.capacity(ctx)? as i64;
        let mut out = Vec::new();
        for k in (0..n).rev() {
            if let Some(v) = self.get_version(ctx, -k)? {
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn count(&self, ctx: &Context<'_>) -> R<u64> {
        Ok(self.history(ctx)?.len() as u64)
    }

    pub fn latest_timestamp(&self, ctx: &Context<'_>) -> R<u64> {
        Ok(self.get_version(ctx, 0)?.map_or(0, |v| v.timestamp))
    }
}
