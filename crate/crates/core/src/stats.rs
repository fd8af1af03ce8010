//! Order-independent reductions.
//!
//! Every Monte-Carlo statistic in the crate goes through these helpers so that
//! results do not depend on the number of worker threads: per-path values are
//! collected in path order first, then reduced with a fixed pairwise tree.

use serde::Serialize;

const BLOCK: usize = 32;

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= BLOCK {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let m = mean(values);
        if n < 2 {
            return Estimate {
                mean: m,
                std_err: 0.0,
                n,
            };
        }
        let dev: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
        let var = pairwise_sum(&dev) / (n - 1) as f64;
        Estimate {
            mean: m,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }

    pub fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            std_err: 0.0,
            n: 0,
        }
    }
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

pub fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn euclid_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
