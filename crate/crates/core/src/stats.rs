//! Mergeable sample moments.
//!
//! Both accumulators use Welford updates for single samples and the Chan et
//! al. pairwise formula for merges, so partial results from independent jobs
//! can be combined without losing precision when the mean dominates the
//! spread (e.g. scores that are all close to a large constant).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * n_b / n;
        self.m2 += other.m2 + delta * delta * n_a * n_b / n;
        self.count += other.count;
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.mean * self.count as f64
    }
}

/// Joint moments of a pair of samples, including the co-moment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CoMoments {
    pub a: Moments,
    pub b: Moments,
    c_ab: f64,
}

impl CoMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: f64, b: f64) {
        let delta_a = a - self.a.mean;
        self.a.push(a);
        self.b.push(b);
        // old mean of a, updated mean of b
        self.c_ab += delta_a * (b - self.b.mean);
    }

    pub fn merge(&mut self, other: &CoMoments) {
        if other.a.count == 0 {
            return;
        }
        if self.a.count == 0 {
            *self = *other;
            return;
        }
        let n_a = self.a.count as f64;
        let n_b = other.a.count as f64;
        let n = n_a + n_b;
        let da = other.a.mean - self.a.mean;
        let db = other.b.mean - self.b.mean;
        self.c_ab += other.c_ab + da * db * n_a * n_b / n;
        self.a.merge(&other.a);
        self.b.merge(&other.b);
    }

    pub fn count(&self) -> u64 {
        self.a.count
    }

    pub fn covariance(&self) -> f64 {
        let n = self.a.count;
        if n < 2 {
            0.0
        } else {
            self.c_ab / (n - 1) as f64
        }
    }

    /// Pearson correlation, or `None` when either marginal has zero spread.
    pub fn correlation(&self) -> Option<f64> {
        let va = self.a.variance();
        let vb = self.b.variance();
        if self.a.count < 2 || va <= 0.0 || vb <= 0.0 {
            return None;
        }
        let rho = self.covariance() / (va.sqrt() * vb.sqrt());
        Some(rho.clamp(-1.0, 1.0))
    }

    /// Sample variance of `a + b` derived from the joint moments.
    pub fn variance_of_sum(&self) -> f64 {
        (self.a.variance() + self.b.variance() + 2.0 * self.covariance()).max(0.0)
    }
}

/// Half-width, in standard deviations, of a two-sided normal confidence
/// interval at the given level.
pub fn normal_quantile(level: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    std.inverse_cdf(0.5 + level / 2.0)
}
