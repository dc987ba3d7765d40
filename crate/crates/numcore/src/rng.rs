//! Splittable, counter-based random streams.
//!
//! Every stochastic call site receives its own [`Stream`], derived from the
//! run seed by a path of labels and indices. Streams are ChaCha8 generators
//! whose keys come from a SplitMix64 hash of the derivation path, so two
//! streams with the same path produce identical sequences regardless of what
//! other streams were drawn from in between.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a, stable across builds and platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A node in the stream derivation tree. Cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        Self(splitmix64(seed ^ 0x5EED_0000_0000_0000))
    }

    pub fn child(self, label: &str) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(hash_label(label))))
    }

    pub fn index(self, i: u64) -> Self {
        Self(splitmix64(self.0.wrapping_add(splitmix64(i.wrapping_add(1)))))
    }

    pub fn stream(self) -> Stream {
        let mut seed = [0u8; 32];
        let mut k = self.0;
        for chunk in seed.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        Stream(ChaCha8Rng::from_seed(seed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        StreamKey::root(seed).stream()
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
