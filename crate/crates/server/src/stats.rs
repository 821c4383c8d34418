//! Shard counters reported by GET_STATISTICS.
//!
//! For every request kind `op` there is a count `op` and a latency sum
//! `op_ns` (arrival to response, including any ADO stall). The remaining
//! counters are named after what they count.

use std::collections::BTreeMap;
use std::time::Duration;

#[derive(Debug, Default, Clone)]
pub struct Stats {
    counters: BTreeMap<String, u64>,
}

impl Stats {
    pub fn add(&mut self, name: &str, n: u64) {
        match self.counters.get_mut(name) {
            Some(c) => *c += n,
            None => {
                self.counters.insert(name.to_string(), n);
            }
        }
    }

    pub fn op(&mut self, op: &str, took: Duration) {
        self.add(op, 1);
        self.add(&format!("{op}_ns"), took.as_nanos() as u64);
    }

    pub fn get(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    /// Counters plus the given gauges, sorted by name.
    pub fn snapshot(&self, gauges: &[(&str, u64)]) -> Vec<(String, u64)> {
        let mut all = self.counters.clone();
        for (k, v) in gauges {
            all.insert(k.to_string(), *v);
        }
        all.into_iter().collect()
    }
}
