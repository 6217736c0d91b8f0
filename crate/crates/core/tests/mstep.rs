mod common;

use common::grid::grid;
use common::{random_matrix, random_spd, random_vector};
use nalgebra::{DMatrix, DVector};
use nplds::linalg::kron_identity;
use nplds::simulator::rng_from;
use nplds::vbem::laplace::finite_difference_jacobian;
use nplds::vbem::mstep::{modulator_objective, neuron_objective, vbm_update_modulators};
use nplds::vbem::{HoldoutMask, NewtonSettings, TrialLatents};
use nplds::{build_kernel, Hyperparams, SpikeDataset};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

fn relative_hessian_error<F>(obj: F, x: &DVector<f64>) -> f64
where
    F: Fn(&DVector<f64>, bool) -> nplds::vbem::laplace::Evaluation,
{
    let analytic = obj(x, true).hessian;
    let fd = finite_difference_jacobian(|z| obj(z, true).gradient, x, 1e-5);
    (&analytic - &fd).amax() / analytic.amax().max(1e-8)
}

#[test]
fn loading_objective_hessian_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = rng_from(200 + seed);
        let k = rng.random_range(1..=4);
        let n = rng.random_range(5..40);
        let means: Vec<DVector<f64>> = (0..n).map(|_| random_vector(&mut rng, k, 0.7)).collect();
        let covs: Vec<DMatrix<f64>> = (0..n).map(|_| random_spd(&mut rng, k, 0.05) * 0.2).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let obj = neuron_objective(&means, &covs, &y, 0.1, 1e-3);
        let theta = random_vector(&mut rng, k + 1, 0.4);
        let rel = relative_hessian_error(&obj, &theta);
        assert!(rel < 1e-4, "seed {seed}: relative error {rel:.2e}");
    }
}

#[test]
fn modulator_objective_hessian_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = rng_from(300 + seed);
        let r = rng.random_range(1..=5);
        let k = rng.random_range(1..=3);
        let p = rng.random_range(1..=6);
        let counts = DMatrix::from_fn(r, p, |_, _| rng.random_range(0..40) as f64);
        let weights = DMatrix::from_fn(r, p, |_, _| rng.random_range(1.0..30.0));
        let loading = random_matrix(&mut rng, p, k, 0.5);
        let prior = kron_identity(&random_spd(&mut rng, r, 0.3), k);
        let obj = modulator_objective(&counts, &weights, &loading, &prior);
        let h = random_vector(&mut rng, r * k, 0.5);
        let rel = relative_hessian_error(&obj, &h);
        assert!(rel < 1e-4, "seed {seed}: relative error {rel:.2e}");
    }
}

fn still_latents(t_len: usize, k: usize) -> TrialLatents {
    TrialLatents {
        means: vec![DVector::zeros(k); t_len + 1],
        covs: vec![DMatrix::zeros(k, k); t_len + 1],
        cross_covs: vec![DMatrix::zeros(k, k); t_len],
    }
}

/// One trial, one neuron, latent path fixed at zero: returns the Laplace and the
/// grid posterior mean/variance of the modulator.
fn scalar_modulator(rate: f64, c: f64, sigma2: f64, t_len: usize, seed: u64) -> ((f64, f64), (f64, f64)) {
    let mut rng = rng_from(seed);
    let dist = Poisson::new(rate).unwrap();
    let counts: Vec<u32> = (0..t_len).map(|_| dist.sample(&mut rng) as u32).collect();
    let total: f64 = counts.iter().map(|&y| y as f64).sum();
    let ds = SpikeDataset::new(counts, vec![], 1, t_len, 1, 0, 0.01).unwrap();
    let d = 0.0;
    let kernel = build_kernel(&Hyperparams::new(sigma2, 1.0, 1e-3).unwrap(), &[0], 1).unwrap();
    let post = vbm_update_modulators(
        &[still_latents(t_len, 1)],
        &ds,
        &HoldoutMask::none(1, t_len),
        &DMatrix::from_element(1, 1, c),
        &DVector::from_element(1, d),
        &kernel,
        &DVector::zeros(1),
        &NewtonSettings::ESTEP,
    )
    .unwrap();
    let xs = grid(-8.0, 8.0, 2001);
    let logp: Vec<f64> = xs
        .iter()
        .map(|&h| total * c * h - t_len as f64 * (c * h + d).exp() - 0.5 * h * h / (sigma2 + 1e-3))
        .collect();
    let m = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logp.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean: f64 = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
    let var: f64 = xs.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / z;
    ((post.belief.mean[0], post.belief.cov[(0, 0)]), (mean, var))
}

#[test]
fn modulator_posterior_matches_grid_integration_with_many_counts() {
    for (i, &(rate, c)) in [(20.0, 1.0), (8.0, 1.5), (40.0, 0.8)].iter().enumerate() {
        let ((m, v), (gm, gv)) = scalar_modulator(rate, c, 2.0, 200, i as u64);
        assert!((m - gm).abs() < 1e-3, "mean {m} vs {gm}");
        assert!((v - gv).abs() < 1e-3, "variance {v} vs {gv}");
    }
}

#[test]
fn modulator_posterior_covers_truth() {
    let (r, k, p, t_len) = (2usize, 1usize, 3usize, 400usize);
    let mut covered = 0;
    for seed in 0..100u64 {
        let mut rng = rng_from(1000 + seed);
        let h_true = random_vector(&mut rng, r, 1.0);
        let loading = DMatrix::from_fn(p, k, |_, _| rng.random_range(0.3..0.8));
        let offset = DVector::from_element(p, 0.0);
        let mut counts = Vec::with_capacity(r * t_len * p);
        for i in 0..r {
            for _ in 0..t_len {
                for j in 0..p {
                    let rate = (loading[(j, 0)] * h_true[i] + offset[j]).exp();
                    counts.push(Poisson::new(rate).unwrap().sample(&mut rng) as u32);
                }
            }
        }
        let ds = SpikeDataset::new(counts, vec![], r, t_len, p, 0, 0.01).unwrap();
        let kernel = build_kernel(&Hyperparams::new(100.0, 1.0, 1e-3).unwrap(), &[0, 1], k).unwrap();
        let lats: Vec<_> = (0..r).map(|_| still_latents(t_len, k)).collect();
        let post = vbm_update_modulators(&lats, &ds, &HoldoutMask::none(r, t_len), &loading, &offset, &kernel, &DVector::zeros(r), &NewtonSettings::MSTEP).unwrap();
        let inside = (0..r).all(|i| {
            let sd = post.belief.cov[(i, i)].sqrt();
            (post.belief.mean[i] - h_true[i]).abs() <= 3.0 * sd
        });
        if inside {
            covered += 1;
        }
    }
    assert!(covered >= 95, "covered {covered}/100");
}
