//! Seeded random streams.
//!
//! Every stochastic stage draws from its own ChaCha stream keyed by the run
//! seed plus a small tag path, so resuming at a task boundary needs nothing
//! but the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Float, Tensor};

pub type Rng64 = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng64 {
    let key = tags.iter().fold(splitmix(seed), |h, &t| splitmix(h ^ splitmix(t.wrapping_add(1))));
    ChaCha8Rng::seed_from_u64(key)
}

/// Stage tags used with [`stream`].
pub mod tag {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const LOCAL: u64 = 3;
    pub const GLOBAL: u64 = 4;
    pub const CLASSIFIER: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const SAMPLES: u64 = 7;
    pub const BASELINE: u64 = 8;
    pub const FEATURE_NET: u64 = 9;
}

pub fn normal<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::of(x)
        })
        .collect();
    Tensor::from_vec(shape, v)
}

pub fn uniform<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.random::<f64>())).collect())
}

/// Independent Bernoulli draws, one row per sample, with per-column probabilities.
pub fn bernoulli_rows<T: Float>(rng: &mut impl Rng, rows: usize, probs: &[f64]) -> Tensor<T> {
    let mut v = Vec::with_capacity(rows * probs.len());
    for _ in 0..rows {
        for &p in probs {
            v.push(if rng.random::<f64>() < p { T::one() } else { T::zero() });
        }
    }
    Tensor::from_vec(&[rows, probs.len()], v)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
    idx
}
