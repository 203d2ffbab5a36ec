//! Seedable, splittable random streams.
//!
//! Every stochastic operation in the workspace takes a `SeedStream` explicitly.
//! Child streams are derived from the parent's seed and a label, so the
//! draws of one consumer never shift those of another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SeedStream {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a; stable across platforms and builds.
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream named by `label`. Does not advance `self`.
    pub fn split(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(label_hash(label))))
    }

    /// Independent child stream named by an integer, e.g. a step or item index.
    pub fn split_index(&self, index: u64) -> Self {
        Self::new(splitmix64(self.seed.wrapping_add(splitmix64(index ^ 0x5851_F42D_4C95_7F2D))))
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeedStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeedStream::new(7);
        let mut b = SeedStream::new(7);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_is_label_dependent_and_pure() {
        let root = SeedStream::new(1);
        let mut x = root.split("data");
        let mut y = root.split("model");
        let mut x2 = root.split("data");
        let a = x.next_u64();
        assert_ne!(a, y.next_u64());
        assert_eq!(a, x2.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut r = SeedStream::new(3);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(5) < 5);
        }
    }
}
