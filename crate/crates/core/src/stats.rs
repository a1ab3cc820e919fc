//! Order-fixed reductions.
//!
//! Sums are taken over a fixed binary tree of blocks, so the result of a
//! reduction depends only on the data, never on how work was scheduled.

use serde::{Deserialize, Serialize};

const LEAF: usize = 64;

/// Pairwise (tree) summation with a fixed leaf size.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean of `xs` (NaN for an empty slice).
pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Mean with its standard error from i.i.d. samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub n: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let m = mean(xs);
        let variance = if n > 1 {
            let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
            pairwise_sum(&sq) / (n - 1) as f64
        } else {
            0.0
        };
        MeanEstimate {
            mean: m,
            std_error: (variance / n as f64).sqrt(),
            variance,
            n,
        }
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
