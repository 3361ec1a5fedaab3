//! Sample statistics with a fixed summation order.

use serde::Serialize;

use crate::scalar::Scalar;

/// Path range `[lo, hi)` of batch `b` when `paths` are split into `batches` fixed blocks.
pub fn batch_bounds(paths: usize, batches: usize, b: usize) -> (usize, usize) {
    (b * paths / batches, (b + 1) * paths / batches)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0 }
    }

    /// `|value - target| <= z * std_error`.
    pub fn within(&self, target: f64, z: f64) -> bool {
        (self.value - target).abs() <= z * self.std_error
    }
}

/// Count-weighted mean of batch means, with the batch-means standard error.
/// The summation order is fixed, so the result does not depend on threading.
pub fn batch_estimate(means: &[f64], counts: &[usize]) -> Estimate {
    assert_eq!(means.len(), counts.len());
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Estimate { value: f64::NAN, std_error: f64::NAN };
    }
    let value = means.iter().zip(counts).map(|(m, &c)| m * c as f64).sum::<f64>() / total as f64;
    let b = means.len();
    if b < 2 {
        return Estimate::exact(value);
    }
    let ss: f64 = means.iter().map(|m| (m - value) * (m - value)).sum();
    Estimate {
        value,
        std_error: (ss / (b * (b - 1)) as f64).sqrt(),
    }
}

/// Means of `per_path` over the fixed path batches.
pub fn batch_means(per_path: &[f64], batches: usize) -> (Vec<f64>, Vec<usize>) {
    (0..batches)
        .map(|b| {
            let (lo, hi) = batch_bounds(per_path.len(), batches, b);
            let sum: f64 = per_path[lo..hi].iter().sum();
            (sum / (hi - lo).max(1) as f64, hi - lo)
        })
        .unzip()
}

/// Sample mean and its standard error `std / sqrt(M)`.
pub fn mean_and_se<T: Scalar>(xs: &[T]) -> (T, T) {
    let m = xs.len();
    if m == 0 {
        return (T::nan(), T::nan());
    }
    let mf = T::of_usize(m);
    let mean = xs.iter().copied().fold(T::zero(), |a, b| a + b) / mf;
    if m == 1 {
        return (mean, T::zero());
    }
    let ss = xs
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .fold(T::zero(), |a, b| a + b);
    let var = ss / T::of_usize(m - 1);
    (mean, (var / mf).sqrt())
}

/// Running sums for a per-path statistic accumulated in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }
}
