//! Crash-state enumeration and checking.
//!
//! A recorded operation yields a list of [`CrashPoint`]s. Each point expands
//! into crash images: every subset of its dirty lines when there are few of
//! them, otherwise a random sample that always includes "none survived" and
//! "all survived". Checking the images is embarrassingly parallel; with the
//! `parallel` feature it runs on rayon, otherwise sequentially.

use rand::{Rng, SeedableRng};

use crate::pmem::{CrashPoint, Image};

#[derive(Clone, Copy, Debug)]
pub struct SubsetPolicy {
    /// Enumerate all 2^n subsets when a point has at most this many dirty lines.
    pub exhaustive_up_to: usize,
    /// Random subsets drawn otherwise (in addition to the empty and full set).
    pub samples: usize,
}

impl Default for SubsetPolicy {
    fn default() -> Self {
        Self { exhaustive_up_to: 6, samples: 16 }
    }
}

/// One crash image with its provenance.
#[derive(Clone)]
pub struct CrashCase {
    pub point: usize,
    pub mask: Vec<bool>,
    pub image: Image,
}

pub fn enumerate(points: &[CrashPoint], policy: SubsetPolicy, seed: u64) -> Vec<CrashCase> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let n = p.pending.len();
        let masks: Vec<Vec<bool>> = if n <= policy.exhaustive_up_to {
            (0u64..1 << n).map(|m| (0..n).map(|b| m >> b & 1 == 1).collect()).collect()
        } else {
            let mut v = vec![vec![false; n], vec![true; n]];
            v.extend((0..policy.samples).map(|_| (0..n).map(|_| rng.random_bool(0.5)).collect()));
            v
        };
        for mask in masks {
            let image = p.materialize_mask(&mask);
            out.push(CrashCase { point: i, mask, image });
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct ExploreReport {
    pub checked: usize,
    pub failures: Vec<(usize, String)>,
}

impl ExploreReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: ExploreReport) {
        self.checked += other.checked;
        self.failures.extend(other.failures);
    }
}

/// Run `check` over every case. Failures are reported with the case index.
pub fn explore<F>(cases: &[CrashCase], check: F) -> ExploreReport
where
    F: Fn(&CrashCase) -> Result<(), String> + Sync + Send,
{
    let failures = run_checks(cases, &check);
    ExploreReport { checked: cases.len(), failures }
}

#[cfg(feature = "parallel")]
fn run_checks<F>(cases: &[CrashCase], check: &F) -> Vec<(usize, String)>
where
    F: Fn(&CrashCase) -> Result<(), String> + Sync + Send,
{
    use rayon::prelude::*;
    cases
        .par_iter()
        .enumerate()
        .filter_map(|(i, c)| check(c).err().map(|e| (i, e)))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_checks<F>(cases: &[CrashCase], check: &F) -> Vec<(usize, String)>
where
    F: Fn(&CrashCase) -> Result<(), String> + Sync + Send,
{
    explore_sequential_inner(cases, check)
}

fn explore_sequential_inner<F>(cases: &[CrashCase], check: &F) -> Vec<(usize, String)>
where
    F: Fn(&CrashCase) -> Result<(), String>,
{
    cases.iter().enumerate().filter_map(|(i, c)| check(c).err().map(|e| (i, e))).collect()
}

/// Sequential reference path, always available (benchmarks compare it
/// against [`explore`]).
pub fn explore_sequential<F>(cases: &[CrashCase], check: F) -> ExploreReport
where
    F: Fn(&CrashCase) -> Result<(), String>,
{
    let failures = explore_sequential_inner(cases, &check);
    ExploreReport { checked: cases.len(), failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::Pmem;

    #[test]
    fn exhaustive_subset_count() {
        let pm = Pmem::crash_sim(1 << 16);
        pm.write(0, &[1u8; 64 * 3]).unwrap();
        let pts = vec![pm.crash_point().unwrap()];
        let cases = enumerate(&pts, SubsetPolicy::default(), 0);
        assert_eq!(cases.len(), 8);
        // every subset shows up once
        let mut seen: Vec<Vec<bool>> = cases.iter().map(|c| c.mask.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn sampled_when_many_lines() {
        let pm = Pmem::crash_sim(1 << 16);
        pm.write(0, &[1u8; 64 * 10]).unwrap();
        let pts = vec![pm.crash_point().unwrap()];
        let pol = SubsetPolicy { exhaustive_up_to: 4, samples: 5 };
        let cases = enumerate(&pts, pol, 0);
        assert_eq!(cases.len(), 7);
        assert!(cases[0].mask.iter().all(|b| !b));
        assert!(cases[1].mask.iter().all(|b| *b));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let pm = Pmem::crash_sim(1 << 16);
        pm.write(0, &[1u8; 64 * 5]).unwrap();
        let cases = enumerate(&[pm.crash_point().unwrap()], SubsetPolicy::default(), 3);
        let check = |c: &CrashCase| {
            let mut b = [0u8; 1];
            c.image.read(0, &mut b);
            if b[0] == 1 { Err("first line survived".to_string()) } else { Ok(()) }
        };
        let a = explore(&cases, check);
        let b = explore_sequential(&cases, check);
        assert_eq!(a.failures.len(), 16);
        assert_eq!(a.failures, b.failures);
    }
}
