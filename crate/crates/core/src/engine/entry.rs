//! 64-byte hash table entry.
//!
//! ```text
//! 0..8    hop word: bit i set => slot (bucket + i) holds an item homed here
//!         (bits 0..62; bit 63 is always zero)
//! 8..16   meta: bits 0-1 state, bit 2 key inline, bit 3 value inline,
//!         bits 32-63 write time (unix seconds)
//! 16..40  key field
//! 40..64  value field
//! ```
//!
//! A field holds up to 23 bytes inline with the length in its last byte, or
//! an out-of-line `(offset u64, length u64)` pair.

pub const ENTRY_SIZE: u64 = 64;
pub const INLINE_MAX: usize = 23;
pub const HOP_BITS: u64 = 63;
pub const HOP_MASK: u64 = (1 << HOP_BITS) - 1;

pub const FREE: u64 = 0;
pub const ALLOCATING: u64 = 1;
pub const COMMITTED: u64 = 2;
pub const DELETING: u64 = 3;

const KEY_INLINE: u64 = 1 << 2;
const VALUE_INLINE: u64 = 1 << 3;

pub const KEY_FIELD: u64 = 16;
pub const VALUE_FIELD: u64 = 40;

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HashEntry {
    pub hop: u64,
    pub meta: u64,
    pub key: [u8; 24],
    pub value: [u8; 24],
}

const _: () = assert!(std::mem::size_of::<HashEntry>() == ENTRY_SIZE as usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Field {
    Inline(Vec<u8>),
    Remote { offset: u64, len: u64 },
}

impl Field {
    pub fn len(&self) -> u64 {
        match self {
            Field::Inline(b) => b.len() as u64,
            Field::Remote { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn encode(&self) -> [u8; 24] {
        let mut f = [0u8; 24];
        match self {
            Field::Inline(b) => {
                assert!(b.len() <= INLINE_MAX);
                f[..b.len()].copy_from_slice(b);
                f[23] = b.len() as u8;
            }
            Field::Remote { offset, len } => {
                f[..8].copy_from_slice(&offset.to_le_bytes());
                f[8..16].copy_from_slice(&len.to_le_bytes());
            }
        }
        f
    }

    fn decode(f: &[u8; 24], inline: bool) -> Self {
        if inline {
            let n = (f[23] as usize).min(INLINE_MAX);
            Field::Inline(f[..n].to_vec())
        } else {
            Field::Remote {
                offset: u64::from_le_bytes(f[..8].try_into().unwrap()),
                len: u64::from_le_bytes(f[8..16].try_into().unwrap()),
            }
        }
    }
}

impl HashEntry {
    pub fn decode(b: &[u8; 64]) -> Self {
        Self {
            hop: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            meta: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            key: b[16..40].try_into().unwrap(),
            value: b[40..64].try_into().unwrap(),
        }
    }

    pub fn encode(&self) -> [u8; 64] {
        let mut b = [0u8; 64];
        b[0..8].copy_from_slice(&self.hop.to_le_bytes());
        b[8..16].copy_from_slice(&self.meta.to_le_bytes());
        b[16..40].copy_from_slice(&self.key);
        b[40..64].copy_from_slice(&self.value);
        b
    }

    /// Entry body (everything except the hop word).
    pub fn body(&self) -> [u8; 56] {
        self.encode()[8..].try_into().unwrap()
    }

    pub fn new(key: &Field, value: &Field, state: u64, time: u32) -> Self {
        let mut e = Self::default();
        e.set_key(key);
        e.set_value(value);
        e.set_state(state);
        e.set_time(time);
        e
    }

    pub fn state(&self) -> u64 {
        self.meta & 3
    }

    pub fn is_committed(&self) -> bool {
        self.state() == COMMITTED
    }

    pub fn set_state(&mut self, s: u64) {
        self.meta = (self.meta & !3) | (s & 3);
    }

    pub fn time(&self) -> u32 {
        (self.meta >> 32) as u32
    }

    pub fn set_time(&mut self, t: u32) {
        self.meta = (self.meta & 0xffff_ffff) | (t as u64) << 32;
    }

    pub fn key_field(&self) -> Field {
        Field::decode(&self.key, self.meta & KEY_INLINE != 0)
    }

    pub fn value_field(&self) -> Field {
        Field::decode(&self.value, self.meta & VALUE_INLINE != 0)
    }

    pub fn set_key(&mut self, f: &Field) {
        self.key = f.encode();
        self.meta = match f {
            Field::Inline(_) => self.meta | KEY_INLINE,
            Field::Remote { .. } => self.meta & !KEY_INLINE,
        };
    }

    pub fn set_value(&mut self, f: &Field) {
        self.value = f.encode();
        self.meta = match f {
            Field::Inline(_) => self.meta | VALUE_INLINE,
            Field::Remote { .. } => self.meta & !VALUE_INLINE,
        };
    }
}
