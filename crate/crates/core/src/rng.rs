//! Counter-based random streams.
//!
//! Every random draw made by a sampler comes from a stream identified by
//! `(seed, domain, entity, step)`. The generator for a stream is a pure
//! function of that key, so results never depend on how work is split
//! between threads or in which order entities are processed.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Stream domains. Each kind of entity draws from its own key space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Primal variable or cluster resampling.
    Primal = 1,
    /// Dual variable resampling.
    Dual = 2,
    /// Random spanning-forest selection.
    Forest = 3,
    /// Initial primal state.
    InitPrimal = 4,
    /// Initial dual state.
    InitDual = 5,
    /// Forward-filter backward-sample on one tree of a forest.
    Tree = 6,
    /// Per-chain seed derivation.
    Chain = 7,
    /// Restarts of local searches.
    Restart = 8,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Factory for independent per-entity generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, domain: Domain, entity: u64, step: u64) -> u64 {
        let mut h = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = mix64(h ^ (domain as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
        h = mix64(h ^ entity);
        mix64(h ^ step.rotate_left(32))
    }

    /// Generator for `entity` at `step` within `domain`.
    pub fn stream(&self, domain: Domain, entity: usize, step: u64) -> SplitMix64 {
        SplitMix64::seed_from_u64(self.key(domain, entity as u64, step))
    }

    /// Single uniform draw in `[0, 1)` from the stream's first output.
    #[inline]
    pub fn uniform(&self, domain: Domain, entity: usize, step: u64) -> f64 {
        self.stream(domain, entity, step).random::<f64>()
    }

    /// Derived stream factory, e.g. for chain `c` of a multi-chain run.
    pub fn child(&self, domain: Domain, index: usize) -> RngStreams {
        RngStreams::new(self.key(domain, index as u64, 0))
    }
}

/// Sample an index from unnormalized log weights using uniform `u`.
///
/// Entries equal to `-inf` have zero probability. Returns `None` when every
/// entry is `-inf`.
pub fn sample_log_weights(log_w: &[f64], u: f64) -> Option<usize> {
    if log_w.len() == 2 {
        let (a, b) = (log_w[0], log_w[1]);
        if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
            return None;
        }
        // P(index 1) = sigmoid(b - a)
        let p1 = if a == f64::NEG_INFINITY {
            1.0
        } else if b == f64::NEG_INFINITY {
            0.0
        } else {
            1.0 / (1.0 + (a - b).exp())
        };
        return Some(usize::from(u < p1));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let total: f64 = log_w.iter().map(|&l| (l - max).exp()).sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &l) in log_w.iter().enumerate() {
        let w = (l - max).exp();
        if w > 0.0 {
            acc += w;
            last = k;
            if target < acc {
                return Some(k);
            }
        }
    }
    Some(last)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalize log weights into probabilities in place.
pub fn softmax_in_place(values: &mut [f64]) {
    let lse = log_sum_exp(values);
    for v in values.iter_mut() {
        *v = (*v - lse).exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_only_on_key() {
        let s = RngStreams::new(42);
        let a = s.uniform(Domain::Primal, 3, 10);
        assert_eq!(a, RngStreams::new(42).uniform(Domain::Primal, 3, 10));
        assert_ne!(a, s.uniform(Domain::Primal, 3, 11));
        assert_ne!(a, s.uniform(Domain::Primal, 4, 10));
        assert_ne!(a, s.uniform(Domain::Dual, 3, 10));
        assert_ne!(a, RngStreams::new(43).uniform(Domain::Primal, 3, 10));
    }

    #[test]
    fn stream_uniforms_look_uniform() {
        let s = RngStreams::new(7);
        let n = 200_000;
        let mean: f64 = (0..n).map(|i| s.uniform(Domain::Primal, i, 0)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
        let mean: f64 = (0..n).map(|t| s.uniform(Domain::Primal, 0, t as u64)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn log_weight_sampling() {
        let w = [0.0, f64::NEG_INFINITY, 0.0];
        assert_eq!(sample_log_weights(&w, 0.1), Some(0));
        assert_eq!(sample_log_weights(&w, 0.9), Some(2));
        assert_eq!(sample_log_weights(&[f64::NEG_INFINITY; 3], 0.5), None);
        assert_eq!(sample_log_weights(&[f64::NEG_INFINITY, 0.0], 0.0), Some(1));
        assert_eq!(sample_log_weights(&[0.0, f64::NEG_INFINITY], 0.999), Some(0));
        // P(1) = 1/(1+e^-1)
        let p1 = 1.0 / (1.0 + (-1f64).exp());
        assert_eq!(sample_log_weights(&[0.0, 1.0], p1 - 1e-9), Some(1));
        assert_eq!(sample_log_weights(&[0.0, 1.0], p1 + 1e-9), Some(0));
    }

    #[test]
    fn lse() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
