//! Seeded samplers shared by the Monte-Carlo risk estimator and the
//! attack search. Streams derived from one root seed keep parallel
//! fan-out deterministic regardless of thread count.

use crate::matrix::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent generator for (seed, stream); the same pair always
/// yields the same sequence.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One splitmix64 round over the pair; derives well-separated child
/// seeds from a root seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix of independent standard normals.
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Uniform draw from the Frobenius sphere of the given radius (the
/// direction of a normal matrix, rescaled). Radius zero yields the zero
/// matrix.
pub fn frobenius_sphere(rng: &mut ChaCha8Rng, rows: usize, cols: usize, radius: f64) -> Matrix {
    if radius == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    loop {
        let m = normal_matrix(rng, rows, cols);
        let norm = m.frobenius_norm();
        if norm > 1e-12 {
            return m.scale(radius / norm);
        }
    }
}
