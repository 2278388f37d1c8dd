//! Seeded random streams.
//!
//! Every random draw in the toolkit goes through [`StreamRng`], a xoshiro256**
//! generator seeded with splitmix64 (`seed_from_u64`). Independent substreams
//! of one seed are obtained by jumping: substream `k` is the seeded state
//! advanced by `k` calls to `jump()` (2^128 steps each). Uniforms use the top
//! 53 bits: `(x >> 11) * 2^-53`.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng(Xoshiro256StarStar);

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn substream(seed: u64, k: u64) -> Self {
        let mut inner = Xoshiro256StarStar::seed_from_u64(seed);
        for _ in 0..k {
            inner.jump();
        }
        Self(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * bound
    }

    /// Exp(1) draw by inversion.
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    /// Inverse-CDF draw from a cumulative distribution whose last entry is the
    /// total mass. Zero-probability entries are never returned.
    pub fn categorical(&mut self, cumulative: &[f64]) -> usize {
        let total = *cumulative.last().expect("empty distribution");
        let u = self.uniform() * total;
        let idx = cumulative.partition_point(|&c| c <= u);
        idx.min(cumulative.len() - 1)
    }

    pub fn state(&self) -> [u64; 4] {
        #[derive(serde::Deserialize)]
        struct Raw {
            s: [u64; 4],
        }
        let value = serde_json::to_value(&self.0).expect("xoshiro state serializes");
        serde_json::from_value::<Raw>(value).expect("xoshiro state layout").s
    }

    pub fn from_state(state: [u64; 4]) -> Self {
        let mut seed = [0u8; 32];
        for (chunk, word) in seed.chunks_exact_mut(8).zip(state) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self(Xoshiro256StarStar::from_seed(seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trips() {
        let mut a = StreamRng::substream(42, 3);
        a.next_u64();
        let mut b = StreamRng::from_state(a.state());
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ() {
        let mut a = StreamRng::substream(7, 0);
        let mut b = StreamRng::substream(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(StreamRng::substream(7, 0), StreamRng::new(7));
    }

    #[test]
    fn categorical_skips_zero_mass() {
        let mut rng = StreamRng::new(1);
        let cum = [0.0, 0.5, 0.5, 1.0];
        for _ in 0..1000 {
            let i = rng.categorical(&cum);
            assert!(i == 1 || i == 3);
        }
    }
}
