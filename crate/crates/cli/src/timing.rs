//! Wall-clock measurement on the monotonic clock.

use std::time::Instant;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub reps: usize,
    pub warmup: usize,
    /// Calls are batched so one sample lasts at least this long, which
    /// keeps microsecond kernels above timer and scheduler noise.
    pub min_sample_ns: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { reps: 5, warmup: 1, min_sample_ns: 200_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Timing {
    pub median_ns: u64,
    pub min_ns: u64,
    pub p99_ns: u64,
    pub samples: usize,
}

/// Run `f` `warmup` times untimed, then record `reps` samples of the
/// per-call time.
pub fn measure(cfg: TimingConfig, mut f: impl FnMut()) -> Timing {
    for _ in 0..cfg.warmup {
        f();
    }
    let t = Instant::now();
    f();
    let once = (t.elapsed().as_nanos() as u64).max(1);
    let inner = (cfg.min_sample_ns / once).clamp(1, 1 << 16);
    let mut samples: Vec<u64> = (0..cfg.reps.max(1))
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_nanos() as u64 / inner
        })
        .collect();
    summarize(&mut samples)
}

/// [`measure`] for several functions at once, taking their samples in
/// round-robin order so slow drifts and bursts of machine noise land on
/// all of them alike instead of on whichever ran during the burst.
pub fn measure_interleaved(cfg: TimingConfig, fs: &mut [&mut dyn FnMut()]) -> Vec<Timing> {
    let inner: Vec<u64> = fs
        .iter_mut()
        .map(|f| {
            for _ in 0..cfg.warmup {
                f();
            }
            let t = Instant::now();
            f();
            let once = (t.elapsed().as_nanos() as u64).max(1);
            (cfg.min_sample_ns / once).clamp(1, 1 << 16)
        })
        .collect();
    let mut samples = vec![Vec::with_capacity(cfg.reps.max(1)); fs.len()];
    for _ in 0..cfg.reps.max(1) {
        for ((f, &n), s) in fs.iter_mut().zip(&inner).zip(samples.iter_mut()) {
            let t = Instant::now();
            for _ in 0..n {
                f();
            }
            s.push(t.elapsed().as_nanos() as u64 / n);
        }
    }
    samples.iter_mut().map(|s| summarize(s)).collect()
}

/// Median (mean of the middle pair for even counts), minimum and
/// nearest-rank 99th percentile.
pub fn summarize(samples: &mut [u64]) -> Timing {
    assert!(!samples.is_empty(), "no samples");
    samples.sort_unstable();
    let n = samples.len();
    let median = if n % 2 == 1 { samples[n / 2] } else { (samples[n / 2 - 1] + samples[n / 2]) / 2 };
    let rank = (n * 99).div_ceil(100).max(1);
    Timing { median_ns: median, min_ns: samples[0], p99_ns: samples[rank - 1], samples: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let t = summarize(&mut [5, 1, 3]);
        assert_eq!((t.median_ns, t.min_ns, t.p99_ns), (3, 1, 5));
        let t = summarize(&mut [4, 1, 3, 2]);
        assert_eq!(t.median_ns, 2);
        let mut many: Vec<u64> = (1..=200).collect();
        assert_eq!(summarize(&mut many).p99_ns, 198);
    }

    #[test]
    fn interleaved_keeps_order_and_counts() {
        let (mut a, mut b) = (0, 0);
        let cfg = TimingConfig { reps: 4, warmup: 1, min_sample_ns: 0 };
        let t = measure_interleaved(cfg, &mut [&mut || a += 1, &mut || b += 1]);
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.samples == 4));
        assert_eq!((a, b), (6, 6));
    }

    #[test]
    fn measure_counts_every_rep() {
        let mut calls = 0;
        let cfg = TimingConfig { reps: 3, warmup: 2, min_sample_ns: 0 };
        let t = measure(cfg, || calls += 1);
        assert_eq!(t.samples, 3);
        assert_eq!(calls, 2 + 1 + 3);
    }
}
