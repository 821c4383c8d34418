//! Harnesses shared by the end-to-end acceptance run: engines checked
//! against an ordered-map model, crash checks that compare every recovered
//! image with the state before and after one operation, and an in-process
//! stand-in for a shard running the versioning plugin.

pub mod engines;
pub mod versioning;

use std::collections::BTreeMap;

pub const MIB: u64 = 1 << 20;

/// Key to value, as the store should hold it.
pub type Model = BTreeMap<Vec<u8>, Vec<u8>>;
