//! Portable seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8, a 64-bit counter-based
//! stream cipher generator whose output is identical on every platform. Work
//! items get their own stream via [`SeededRng::derive`], so results never depend
//! on iteration order or on how work is split across threads.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a seed and a path of labels into one 64-bit sub-seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(seed), |acc, &l| mix(acc ^ mix(l)))
}

/// FNV-1a hash of a string, used to turn names into derivation labels.
pub fn label(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Clone, Debug)]
pub struct SeededRng(ChaCha8Rng);

/// Serializable position of a [`SeededRng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        Self::new(derive_seed(seed, labels))
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut r = Self::new(state.seed);
        r.0.set_word_pos(state.word_pos);
        r
    }

    /// Current position; `seed` must be the value this generator was created from.
    pub fn state(&self, seed: u64) -> RngState {
        RngState {
            seed,
            word_pos: self.0.get_word_pos(),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random()
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in the inclusive range `lo..=hi`.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| SeededRng::derive(7, &[1, 2]).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn state_round_trip_resumes_the_stream() {
        let mut r = SeededRng::new(42);
        for _ in 0..13 {
            r.next_u64();
        }
        let st = r.state(42);
        let mut resumed = SeededRng::from_state(&st);
        for _ in 0..5 {
            assert_eq!(r.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn known_first_value_is_stable() {
        // Pinned so a dependency upgrade that changes the stream is caught.
        let v = SeededRng::new(0).next_u64();
        assert_eq!(v, 13080132717333068652);
    }
}
