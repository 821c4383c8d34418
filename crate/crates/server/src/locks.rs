//! Per-key locks held on behalf of ADO work items.
//!
//! Invokes take a write lock on their target key; signals take a read
//! lock. Keys a plugin opens or creates through callbacks are write-locked
//! too. Every lock a work item takes joins that item's deferred list, and
//! the whole list is released when the item completes.

use std::collections::HashMap;

use mcaslite_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Read,
    Write,
}

#[derive(Debug)]
struct Entry {
    mode: Mode,
    holders: Vec<u64>,
}

type LockKey = (u64, Vec<u8>);

#[derive(Debug, Default)]
pub struct LockTable {
    locks: HashMap<LockKey, Entry>,
    deferred: HashMap<u64, Vec<LockKey>>,
}

impl LockTable {
    /// Lock `key` for `work`. Re-locking a key the work already holds
    /// succeeds; a sole read holder may upgrade. Returns whether a new
    /// lock was taken.
    pub fn lock(&mut self, pool: u64, key: &[u8], mode: Mode, work: u64) -> Result<bool, Error> {
        let k = (pool, key.to_vec());
        match self.locks.get_mut(&k) {
            None => {
                self.locks.insert(k.clone(), Entry { mode, holders: vec![work] });
                self.deferred.entry(work).or_default().push(k);
                Ok(true)
            }
            Some(e) if e.holders.contains(&work) => {
                if mode == Mode::Write && e.mode == Mode::Read {
                    if e.holders.len() > 1 {
                        return Err(Error::Locked);
                    }
                    e.mode = Mode::Write;
                }
                Ok(false)
            }
            Some(e) if e.mode == Mode::Read && mode == Mode::Read => {
                e.holders.push(work);
                self.deferred.entry(work).or_default().push(k);
                Ok(true)
            }
            Some(_) => Err(Error::Locked),
        }
    }

    /// Drop `work`'s lock on `key` ahead of completion.
    pub fn unlock(&mut self, pool: u64, key: &[u8], work: u64) -> bool {
        let k = (pool, key.to_vec());
        let Some(e) = self.locks.get_mut(&k) else { return false };
        let Some(i) = e.holders.iter().position(|&h| h == work) else { return false };
        e.holders.swap_remove(i);
        if e.holders.is_empty() {
            self.locks.remove(&k);
        }
        if let Some(d) = self.deferred.get_mut(&work) {
            d.retain(|x| x != &k);
        }
        true
    }

    /// Release everything on `work`'s deferred list.
    pub fn release_all(&mut self, work: u64) -> usize {
        let keys = self.deferred.remove(&work).unwrap_or_default();
        for k in &keys {
            if let Some(e) = self.locks.get_mut(k) {
                e.holders.retain(|&h| h != work);
                if e.holders.is_empty() {
                    self.locks.remove(k);
                }
            }
        }
        keys.len()
    }

    /// May a client operation touch `key` now?
    pub fn check_client(&self, pool: u64, key: &[u8], write: bool) -> Result<(), Error> {
        match self.locks.get(&(pool, key.to_vec())) {
            Some(_) if write => Err(Error::Locked),
            Some(e) if e.mode == Mode::Write => Err(Error::Locked),
            _ => Ok(()),
        }
    }

    pub fn mode(&self, pool: u64, key: &[u8]) -> Option<Mode> {
        self.locks.get(&(pool, key.to_vec())).map(|e| e.mode)
    }

    pub fn held(&self) -> usize {
        self.locks.len()
    }

    pub fn held_by(&self, work: u64) -> usize {
        self.deferred.get(&work).map_or(0, Vec::len)
    }

    /// Locks and deferred lists describe the same holdings.
    pub fn audit(&self) -> Result<(), String> {
        let mut n = 0;
        for (k, e) in &self.locks {
            if e.holders.is_empty() {
                return Err(format!("lock on {k:?} has no holder"));
            }
            if e.mode == Mode::Write && e.holders.len() != 1 {
                return Err(format!("write lock on {k:?} has {} holders", e.holders.len()));
            }
            for h in &e.holders {
                if !self.deferred.get(h).is_some_and(|d| d.contains(k)) {
                    return Err(format!("lock on {k:?} missing from the deferred list of work {h}"));
                }
            }
            n += e.holders.len();
        }
        let listed: usize = self.deferred.values().map(Vec::len).sum();
        if listed != n {
            return Err(format!("{listed} deferred entries for {n} holdings"));
        }
        Ok(())
    }
}
