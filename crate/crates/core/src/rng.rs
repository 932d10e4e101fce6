//! Seeded random streams.
//!
//! Every stochastic piece of the pipeline (weight init, quantization noise,
//! stochastic gates, batch sampling, synthetic images) draws from an
//! [`RngState`]. The stream is ChaCha8, so a seed yields the same numbers on
//! every platform. Child streams are derived with [`RngState::fork`], which
//! depends only on the parent seed and a label, never on how many values the
//! parent has already produced.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `label`.
    pub fn fork(&self, label: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(1))))
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.gen::<f32>()
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform sample strictly inside `(0, 1)`, safe to take logs of.
    pub fn open_unit(&mut self) -> f32 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard normal sample (Box-Muller).
    pub fn normal(&mut self) -> f32 {
        let u1 = self.open_unit() as f64;
        let u2 = self.uniform() as f64;
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(7);
        let mut b = RngState::new(7);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn fork_ignores_parent_position() {
        let a = RngState::new(3);
        let mut b = RngState::new(3);
        b.next_u64();
        assert_eq!(a.fork(5).next_u64(), b.fork(5).next_u64());
        assert_ne!(a.fork(5).next_u64(), a.fork(6).next_u64());
    }

    #[test]
    fn uniform_in_half_open_range() {
        let mut r = RngState::new(11);
        for _ in 0..10_000 {
            let v = r.uniform_in(-0.5, 0.5);
            assert!((-0.5..0.5).contains(&v));
        }
    }
}
