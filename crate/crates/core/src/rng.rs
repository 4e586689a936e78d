//! Seeded pseudo-random streams.
//!
//! Every random draw in the crate goes through [`Rng`], a xoshiro256++
//! generator whose 256-bit state is filled from the `u64` seed by
//! SplitMix64. The derived distributions are kept deliberately simple so
//! the streams can be reproduced bit-for-bit from another language:
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)` = `(next_u64() as u128 * n) >> 64` (multiply-shift).
//! * `normal()` = Box-Muller cosine branch on two uniforms
//!   `u1 = 1 - uniform()`, `u2 = uniform()`: `sqrt(-2 ln u1) * cos(2 pi u2)`.
//! * `shuffle` = Fisher-Yates from the last index down, using `below(i + 1)`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    /// Independent stream derived from `seed` and a stream index.
    pub fn stream(seed: u64, index: u64) -> Self {
        Rng::seed(seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
