#![allow(dead_code)]

pub mod grid;
pub mod kalman;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * normal(rng))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * normal(rng))
}

/// Random `k x k` matrix rescaled to spectral radius `rho`.
pub fn random_stable(rng: &mut ChaCha8Rng, k: usize, rho: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, k, k, 1.0);
    let current = nplds::linalg::spectral_radius(&a).max(1e-3);
    a * (rho / current)
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let f = random_matrix(rng, n, n, 1.0);
    &f * f.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}
