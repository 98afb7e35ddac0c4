//! Seed derivation. Every random stream in a run is derived from the root
//! seed and a stream label, so components never share generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream labels used by the trainer.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const ITERATION: u64 = 2;
    pub const EVALUATION: u64 = 3;
    pub const DEMOS: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` for the given stream label.
pub fn split_seed(root: u64, label: u64) -> u64 {
    splitmix64(splitmix64(root) ^ splitmix64(label.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(root: u64, label: u64) -> Stream {
    Stream::seed_from_u64(split_seed(root, label))
}

/// Stream for a (label, index) pair, e.g. one per training iteration.
pub fn indexed_stream(root: u64, label: u64, index: u64) -> Stream {
    Stream::seed_from_u64(split_seed(split_seed(root, label), index))
}

/// Inverse-CDF draw from a probability vector. Falls back to the last index
/// with positive mass when rounding leaves the cumulative sum short of `u`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
