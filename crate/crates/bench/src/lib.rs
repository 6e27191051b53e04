//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamfuse::{PairInput, SiameseModel};

/// Row-major matrix of `rows × dim` values in [-1, 1).
pub fn random_rows(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

/// Model with small positive biases so no input maps to the zero vector.
pub fn model(input_dim: usize, layers: &[usize], seed: u64) -> SiameseModel {
    let mut m = SiameseModel::init(input_dim, layers, seed).expect("valid shape");
    for l in 0..m.num_layers() {
        m.biases_mut(l).iter_mut().for_each(|b| *b = 0.01);
    }
    m
}

/// `n` pairs over consecutive rows of `rows`, grades cycling 0..=3.
pub fn pairs(rows: &[f64], dim: usize, n: usize) -> Vec<PairInput<'_>> {
    (0..n)
        .map(|i| PairInput {
            a: &rows[2 * i * dim..(2 * i + 1) * dim],
            b: &rows[(2 * i + 1) * dim..(2 * i + 2) * dim],
            y: (i % 4) as u8,
        })
        .collect()
}

/// Relevance grades in 0..=3.
pub fn grades(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..=3)).collect()
}
