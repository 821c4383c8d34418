//! Latency histograms and percentiles.
//!
//! Bins are linear over [min, p99.99]; anything slower lands in a separate
//! overflow count, so a handful of stalls cannot flatten the plot. With
//! the `parallel` feature sorting and binning run on rayon.

use serde::{Deserialize, Serialize};

pub const BINS: usize = 40;
pub const DEFAULT_SAMPLES: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    /// Lower edge of the first bin, ns.
    pub lo: u64,
    /// Upper edge of the last bin (inclusive), ns.
    pub hi: u64,
    pub counts: Vec<u64>,
    /// Samples above `hi`.
    pub overflow: u64,
    pub samples: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub min: u64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub p999: u64,
    pub p9999: u64,
    pub max: u64,
    pub mean: f64,
}

impl LatencyHistogram {
    pub fn empty(bins: usize) -> Self {
        Self { lo: 0, hi: 0, counts: vec![0; bins], overflow: 0, samples: 0 }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin width in ns (at least 1).
    pub fn width(&self) -> f64 {
        ((self.hi - self.lo + 1) as f64 / self.bins() as f64).max(1.0)
    }

    /// `[lo, hi)` of bin `i`, ns.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = self.width();
        (self.lo as f64 + w * i as f64, self.lo as f64 + w * (i + 1) as f64)
    }

    /// Bin for `x`, or `None` for overflow. Callers guarantee `x >= lo`.
    pub fn bin_of(&self, x: u64) -> Option<usize> {
        if x > self.hi {
            return None;
        }
        let i = ((x - self.lo) as f64 / self.width()) as usize;
        Some(i.min(self.bins() - 1))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow
    }
}

/// Nearest-rank percentile of sorted samples.
fn rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let r = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[r.clamp(1, n) - 1]
}

fn percentiles(sorted: &[u64]) -> Percentiles {
    if sorted.is_empty() {
        return Percentiles::default();
    }
    let sum: u128 = sorted.iter().map(|&x| x as u128).sum();
    Percentiles {
        min: sorted[0],
        p50: rank(sorted, 50.0),
        p90: rank(sorted, 90.0),
        p99: rank(sorted, 99.0),
        p999: rank(sorted, 99.9),
        p9999: rank(sorted, 99.99),
        max: sorted[sorted.len() - 1],
        mean: sum as f64 / sorted.len() as f64,
    }
}

fn shape(sorted: &[u64], bins: usize) -> LatencyHistogram {
    let mut h = LatencyHistogram::empty(bins);
    if let Some(&lo) = sorted.first() {
        h.lo = lo;
        h.hi = rank(sorted, 99.99);
        h.samples = sorted.len() as u64;
    }
    h
}

fn count_into(h: &LatencyHistogram, xs: &[u64]) -> (Vec<u64>, u64) {
    let mut counts = vec![0; h.bins()];
    let mut over = 0;
    for &x in xs {
        match h.bin_of(x) {
            Some(i) => counts[i] += 1,
            None => over += 1,
        }
    }
    (counts, over)
}

/// Sort `samples` in place and summarise them.
pub fn summarize_sequential(samples: &mut [u64], bins: usize) -> (LatencyHistogram, Percentiles) {
    samples.sort_unstable();
    let mut h = shape(samples, bins);
    (h.counts, h.overflow) = count_into(&h, samples);
    (h, percentiles(samples))
}

#[cfg(feature = "parallel")]
pub fn summarize(samples: &mut [u64], bins: usize) -> (LatencyHistogram, Percentiles) {
    use rayon::prelude::*;
    samples.par_sort_unstable();
    let mut h = shape(samples, bins);
    let parts: Vec<(Vec<u64>, u64)> = samples.par_chunks(64 * 1024).map(|c| count_into(&h, c)).collect();
    for (c, o) in parts {
        for (a, b) in h.counts.iter_mut().zip(c) {
            *a += b;
        }
        h.overflow += o;
    }
    (h, percentiles(samples))
}

#[cfg(not(feature = "parallel"))]
pub fn summarize(samples: &mut [u64], bins: usize) -> (LatencyHistogram, Percentiles) {
    summarize_sequential(samples, bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run() {
        let (h, p) = summarize(&mut [], BINS);
        assert_eq!(h.counts, vec![0; BINS]);
        assert_eq!(h.total(), 0);
        assert_eq!(p, Percentiles::default());
    }

    #[test]
    fn nearest_rank() {
        let s: Vec<u64> = (1..=100).collect();
        assert_eq!(rank(&s, 50.0), 50);
        assert_eq!(rank(&s, 99.0), 99);
        assert_eq!(rank(&s, 99.99), 100);
        assert_eq!(rank(&[7], 0.0), 7);
    }

    #[test]
    fn one_value_fills_the_first_bin() {
        let (h, p) = summarize(&mut [5; 10], BINS);
        assert_eq!(h.counts[0], 10);
        assert_eq!((p.min, p.max, p.mean), (5, 5, 5.0));
    }
}
