//! Consistent-hash ring for spreading keys over shards on the client side.

use std::collections::BTreeMap;

use mcaslite_core::hash::hash64;

const RING_SEED: u64 = 0x7269_6e67;
/// Points per endpoint; enough to keep the largest share within a few
/// percent of the mean for a handful of shards.
pub const DEFAULT_VNODES: usize = 256;

#[derive(Clone, Debug)]
pub struct Ring<E> {
    points: BTreeMap<u64, usize>,
    endpoints: Vec<Option<E>>,
    vnodes: usize,
}

fn point_of(label: &str, v: usize) -> u64 {
    hash64(RING_SEED, format!("{label}#{v}").as_bytes())
}

impl<E: ToString> Ring<E> {
    pub fn new(endpoints: impl IntoIterator<Item = E>) -> Self {
        Self::with_vnodes(endpoints, DEFAULT_VNODES)
    }

    pub fn with_vnodes(endpoints: impl IntoIterator<Item = E>, vnodes: usize) -> Self {
        let mut r = Self { points: BTreeMap::new(), endpoints: Vec::new(), vnodes: vnodes.max(1) };
        for e in endpoints {
            r.add(e);
        }
        r
    }

    /// Placement depends only on the endpoint's label, never on insertion order.
    pub fn add(&mut self, e: E) {
        let label = e.to_string();
        let slot = self.endpoints.len();
        for v in 0..self.vnodes {
            // on a (very unlikely) collision the smaller label wins, so the
            // outcome is still order independent
            let p = point_of(&label, v);
            match self.points.get(&p) {
                Some(&other) if self.endpoints[other].as_ref().is_some_and(|o| o.to_string() <= label) => {}
                _ => {
                    self.points.insert(p, slot);
                }
            }
        }
        self.endpoints.push(Some(e));
    }

    /// Remove the endpoint labelled `label`. Only its keys move.
    pub fn remove(&mut self, label: &str) -> Option<E> {
        let slot = self.endpoints.iter().position(|e| e.as_ref().is_some_and(|e| e.to_string() == label))?;
        self.points.retain(|_, s| *s != slot);
        self.endpoints[slot].take()
    }

    pub fn len(&self) -> usize {
        self.endpoints.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Endpoint owning `key`: the first ring point at or after the key's hash.
    pub fn shard_of(&self, key: &[u8]) -> Option<&E> {
        let h = hash64(RING_SEED, key);
        let (_, &slot) = self.points.range(h..).next().or_else(|| self.points.iter().next())?;
        self.endpoints[slot].as_ref()
    }
}

/// One-shot form: the endpoint in `endpoints` that owns `key`.
pub fn shard_of<'a, E: ToString>(key: &[u8], endpoints: &'a [E]) -> Option<&'a E> {
    let ring = Ring::new(endpoints.iter().map(|e| e.to_string()));
    let owner = ring.shard_of(key)?;
    endpoints.iter().find(|e| e.to_string() == *owner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_endpoint_owns_everything() {
        let r = Ring::new(["a:1"]);
        for k in 0..1000u32 {
            assert_eq!(r.shard_of(&k.to_le_bytes()), Some(&"a:1"));
        }
    }

    #[test]
    fn empty_ring_has_no_owner() {
        let r: Ring<String> = Ring::new([]);
        assert_eq!(r.shard_of(b"k"), None);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let a = Ring::new(["x", "y", "z"]);
        let b = Ring::new(["z", "x", "y"]);
        for k in 0..2000u32 {
            assert_eq!(a.shard_of(&k.to_le_bytes()), b.shard_of(&k.to_le_bytes()));
        }
    }
}
