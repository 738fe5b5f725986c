//! Per-step batch-size sampling.
//!
//! The batch size here is the number of edits compressed into the shared
//! attention pool for one step. Training mostly at large pools with
//! occasional small ones teaches selection at scale without losing the
//! easy regime.

use crate::rng::Rng;
use crate::{Error, Result};
use rand::Rng as _;

#[derive(Clone, Debug)]
pub struct BatchSizeSampler {
    sizes: Vec<usize>,
    cum: Vec<f64>,
}

impl BatchSizeSampler {
    /// `pairs` are (size, rate); rates must sum to 1.
    pub fn new(pairs: &[(usize, f64)]) -> Result<BatchSizeSampler> {
        if pairs.is_empty() {
            return Err(Error::param("sampler", "needs at least one size"));
        }
        if pairs.iter().any(|&(s, r)| s == 0 || !(0.0..=1.0).contains(&r)) {
            return Err(Error::param("sampler", "sizes must be positive, rates in [0, 1]"));
        }
        let sum: f64 = pairs.iter().map(|&(_, r)| r).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param("sampler", "rates must sum to 1"));
        }
        let sizes = pairs.iter().map(|&(s, _)| s).collect();
        let mut acc = 0.0;
        let cum = pairs
            .iter()
            .map(|&(_, r)| {
                acc += r;
                acc
            })
            .collect();
        Ok(BatchSizeSampler { sizes, cum })
    }

    /// Production profile: sizes 8..128, drawing 128 seventy percent of
    /// the time.
    pub fn default_profile() -> BatchSizeSampler {
        BatchSizeSampler::new(&[(8, 0.05), (16, 0.05), (32, 0.05), (64, 0.15), (128, 0.7)])
            .expect("static profile")
    }

    /// Reduced profile for small budgets; keeps the large-pool skew.
    pub fn compact_profile() -> BatchSizeSampler {
        BatchSizeSampler::new(&[(8, 0.2), (16, 0.2), (32, 0.6)]).expect("static profile")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn draw(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.gen();
        for (i, &c) in self.cum.iter().enumerate() {
            if u < c {
                return self.sizes[i];
            }
        }
        *self.sizes.last().unwrap()
    }
}
