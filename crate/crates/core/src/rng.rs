//! Deterministic seeded randomness.
//!
//! Every random choice in the engine (Hadamard sign diagonals, weight init,
//! synthetic video generation) goes through [`RngState`] so runs are
//! bit-reproducible across platforms for a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded RNG with a recorded stream position.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    calls: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            calls: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a named purpose. The tag keeps
    /// per-layer streams decoupled from call-order elsewhere.
    pub fn derive(&self, tag: u64) -> RngState {
        // splitmix64 finalizer over (seed, tag)
        let mut z = self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        RngState::new(z)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of draws made so far (the stream position).
    pub fn position(&self) -> u64 {
        self.calls
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.calls += 1;
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    /// Random sign, +1.0 or -1.0.
    pub fn sign(&mut self) -> f64 {
        self.calls += 1;
        if self.rng.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn fill_uniform(&mut self, out: &mut [f64], lo: f64, hi: f64) {
        for v in out.iter_mut() {
            *v = self.uniform(lo, hi);
        }
    }
}
