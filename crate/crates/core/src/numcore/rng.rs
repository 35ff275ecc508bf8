//! Seeded random streams.
//!
//! All randomness in the crate flows through [`Rng`], a thin wrapper over
//! ChaCha8 (a counter-based stream cipher generator from `rand_chacha`).
//! Independent streams are derived from a master seed and a purpose label
//! (`"data"`, `"init"`, `"heldout"`, ...) by hashing the label with FNV-1a and
//! mixing it into the seed with SplitMix64. The derivation is a pure function,
//! so any stream can be recreated from `(master seed, label)` alone.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma, StandardNormal};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the stream for `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn derive(master: u64, label: &str) -> Self {
        Self::new(derive_seed(master, label))
    }

    /// Child stream of this generator's seed, independent of draws made so far.
    pub fn fork(&self, label: &str) -> Self {
        Self::derive(self.seed, label)
    }

    /// Child stream indexed by an integer (e.g. sequence number).
    pub fn fork_index(&self, label: &str, index: u64) -> Self {
        Self::new(splitmix64(derive_seed(self.seed, label) ^ splitmix64(index)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(&mut self.inner)
    }

    /// Index drawn from `probs` (assumed to sum to one) by inverse CDF.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left a sliver above the cumulative sum: take the last
        // index with positive mass
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::derive(7, "data");
        let mut b = Rng::derive(7, "data");
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn labels_separate_streams() {
        let mut a = Rng::derive(7, "data");
        let mut b = Rng::derive(7, "init");
        assert_ne!(a.uniform().to_bits(), b.uniform().to_bits());
        assert_ne!(derive_seed(1, "x"), derive_seed(2, "x"));
    }

    #[test]
    fn categorical_respects_zero_mass() {
        let mut r = Rng::new(3);
        for _ in 0..1000 {
            assert_eq!(r.categorical(&[0.0, 1.0, 0.0]), 1);
        }
    }
}
