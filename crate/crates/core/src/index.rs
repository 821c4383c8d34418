//! Ordered secondary index over a pool's primary keys.
//!
//! The index is volatile: the shard bulk-loads it from the primary engine
//! when it is attached and again after every restart. Scan positions are
//! ordinals in byte-lexicographic key order; `find` returns the matching
//! key together with the position to resume from.

use std::collections::BTreeSet;
use std::ops::Bound;

use regex::bytes::Regex;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MatchKind {
    Exact = 0,
    Prefix = 1,
    /// Whole-key match against a `regex` crate pattern.
    Regex = 2,
}

impl MatchKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Exact),
            1 => Some(Self::Prefix),
            2 => Some(Self::Regex),
            _ => None,
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct SecondaryIndex {
    keys: BTreeSet<Vec<u8>>,
}

/// Compile `expr` as an anchored whole-key pattern.
pub fn compile(expr: &[u8]) -> Result<Regex> {
    let text = std::str::from_utf8(expr).map_err(|_| Error::BadRegex("pattern is not UTF-8".into()))?;
    Regex::new(&format!("^(?:{text})$")).map_err(|e| Error::BadRegex(e.to_string()))
}

impl SecondaryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_keys<I: IntoIterator<Item = Vec<u8>>>(keys: I) -> Self {
        Self { keys: keys.into_iter().collect() }
    }

    pub fn insert(&mut self, key: &[u8]) {
        if !self.keys.contains(key) {
            self.keys.insert(key.to_vec());
        }
    }

    pub fn remove(&mut self, key: &[u8]) {
        self.keys.remove(key);
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.keys.contains(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &[u8]> {
        self.keys.iter().map(|k| k.as_slice())
    }

    /// First key at ordinal `begin` or later that matches. Returns the key
    /// and the ordinal just past it.
    pub fn find(&self, expr: &[u8], kind: MatchKind, begin: u64) -> Result<(Vec<u8>, u64)> {
        match kind {
            MatchKind::Exact => {
                let pos = self.keys.range::<[u8], _>((Bound::Unbounded, Bound::Excluded(expr))).count() as u64;
                if pos >= begin && self.keys.contains(expr) {
                    Ok((expr.to_vec(), pos + 1))
                } else {
                    Err(Error::NoMatch)
                }
            }
            MatchKind::Prefix => {
                // everything sharing the prefix sits in one contiguous run
                let below = self.keys.range::<[u8], _>((Bound::Unbounded, Bound::Excluded(expr))).count() as u64;
                let start = below.max(begin);
                let skip = (start - below) as usize;
                let mut run = self.keys.range::<[u8], _>((Bound::Included(expr), Bound::Unbounded));
                match run.nth(skip) {
                    Some(k) if k.starts_with(expr) => Ok((k.clone(), start + 1)),
                    _ => Err(Error::NoMatch),
                }
            }
            MatchKind::Regex => {
                let re = compile(expr)?;
                self.keys
                    .iter()
                    .enumerate()
                    .skip(begin as usize)
                    .find(|(_, k)| re.is_match(k))
                    .map(|(i, k)| (k.clone(), i as u64 + 1))
                    .ok_or(Error::NoMatch)
            }
        }
    }

    /// Every match from ordinal 0, in order.
    pub fn scan(&self, expr: &[u8], kind: MatchKind) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::new();
        let mut pos = 0;
        loop {
            match self.find(expr, kind, pos) {
                Ok((k, next)) => {
                    out.push(k);
                    pos = next;
                }
                Err(Error::NoMatch) => return Ok(out),
                Err(e) => return Err(e),
            }
        }
    }
}
