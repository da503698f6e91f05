//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdam_core::metrics::ScoreSet;
use tdam_core::Tensor;

/// Uniform `[-1, 1)` tensor of the given shape.
pub fn random_frames(t: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[t, d], data).expect("shape matches data")
}

/// `n` scores per class with overlapping distributions.
pub fn random_scores(n: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bona: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.7)).collect();
    let spoof: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
    ScoreSet::from_scores(&bona, &spoof)
}
