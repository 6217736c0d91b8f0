//! Moment-based warm start for `C` and `d`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SpikeDataset;

use super::score::HoldoutMask;

/// Starting point of the shared parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialParams {
    pub loading: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub dynamics: DMatrix<f64>,
    pub input_map: DMatrix<f64>,
    /// `r x k` per-trial latent offsets, used as the starting modulator means.
    pub modulators: DMatrix<f64>,
}

/// Diagonal value of the initial dynamics matrix.
pub const INITIAL_DYNAMICS: f64 = 0.8;

/// Moment-matched warm start. Under log-normal rates the count moments give
/// the log-rate covariance `Σ_ij = log(1 + cov(y_i, y_j) / (m_i m_j))` off the
/// diagonal and `Σ_jj = log(1 + (var y_j − m_j) / m_j²)` on it. `C` spans its
/// top-`k` eigenvectors, each column scaled by the square root of its
/// eigenvalue times `1 − 0.8²`, the inverse stationary variance of the initial
/// dynamics; `d_j = log m_j − Σ_jj / 2` with `Σ_jj` taken from the rank-`k` fit.
pub fn initialize(dataset: &SpikeDataset, latent_dim: usize, mask: &HoldoutMask) -> Result<InitialParams> {
    let (r, t_len, p) = (dataset.num_trials(), dataset.num_bins(), dataset.num_neurons());
    let k = latent_dim;
    if k == 0 {
        return Err(Error::Domain("latent dimension must be >= 1".into()));
    }
    let mut n = 0usize;
    let mut sums = DVector::<f64>::zeros(p);
    let mut cross = DMatrix::<f64>::zeros(p, p);
    for i in 0..r {
        for t in 0..t_len {
            if mask.is_held_out(i, t) {
                continue;
            }
            n += 1;
            let row = DVector::from_fn(p, |j, _| dataset.count(i, t, j) as f64);
            sums += &row;
            cross.ger(1.0, &row, &row, 1.0);
        }
    }
    if n == 0 {
        return Err(Error::Domain("no observed bins to initialize from".into()));
    }
    let nf = n as f64;
    let mean = sums.map(|s| (s / nf).max(0.5 / nf));
    let cov = cross / nf - &mean * mean.transpose();
    let log_cov = DMatrix::from_fn(p, p, |a, b| {
        let excess = if a == b { cov[(a, a)] - mean[a] } else { cov[(a, b)] };
        (1.0 + excess / (mean[a] * mean[b])).max(MIN_MOMENT_RATIO).ln()
    });
    let eig = crate::linalg::symmetrized(&log_cov).symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = 1.0 - INITIAL_DYNAMICS * INITIAL_DYNAMICS;
    let mut loading = DMatrix::zeros(p, k);
    let mut rank_k_var = DVector::<f64>::zeros(p);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        let lambda = eig.eigenvalues[idx].max(0.0);
        rank_k_var += v.map(|x| x * x * lambda);
        loading.set_column(col, &(v * (lambda * scale).sqrt()));
    }
    let offset = DVector::from_fn(p, |j, _| mean[j].ln() - 0.5 * rank_k_var[j]);
    let modulators = trial_offsets(dataset, mask, &loading, &mean);
    Ok(InitialParams {
        modulators,
        loading,
        offset,
        dynamics: DMatrix::identity(k, k) * INITIAL_DYNAMICS,
        input_map: DMatrix::zeros(k, dataset.input_dim()),
    })
}

/// Floor on `1 + cov / (m m)` before taking the log.
const MIN_MOMENT_RATIO: f64 = 0.05;

/// Least-squares latent offset of each trial: the projection of the trial's
/// log mean counts, relative to the overall log means, onto the columns of `C`.
fn trial_offsets(dataset: &SpikeDataset, mask: &HoldoutMask, loading: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let (r, t_len, p) = (dataset.num_trials(), dataset.num_bins(), dataset.num_neurons());
    let k = loading.ncols();
    let gram = loading.transpose() * loading + DMatrix::identity(k, k) * 1e-8;
    let Some(gram_inv) = gram.try_inverse() else {
        return DMatrix::zeros(r, k);
    };
    let proj = gram_inv * loading.transpose();
    let mut out = DMatrix::zeros(r, k);
    for i in 0..r {
        let mut sums = DVector::<f64>::zeros(p);
        let mut n = 0usize;
        for t in (0..t_len).filter(|&t| !mask.is_held_out(i, t)) {
            n += 1;
            for j in 0..p {
                sums[j] += dataset.count(i, t, j) as f64;
            }
        }
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        let resid = DVector::from_fn(p, |j, _| (sums[j] / nf).max(0.5 / nf).ln() - mean[j].ln());
        out.set_row(i, &(&proj * resid).transpose());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn underdispersed_counts_give_flat_loading_and_log_mean_offset() {
        let counts = vec![2, 3, 2, 3, 2, 3];
        let ds = SpikeDataset::new(counts, vec![], 1, 3, 2, 0, 0.05).unwrap();
        let init = initialize(&ds, 1, &HoldoutMask::none(1, 3)).unwrap();
        assert_eq!(init.loading.amax(), 0.0);
        assert!((init.offset[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!((init.offset[1] - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(init.dynamics[(0, 0)], INITIAL_DYNAMICS);
    }

    #[test]
    fn loading_follows_shared_fluctuation() {
        // Two neurons that co-vary and one that is constant.
        let mut counts = Vec::new();
        for t in 0..40 {
            let v = if t % 2 == 0 { 0 } else { 5 };
            counts.extend([v, v, 2]);
        }
        let ds = SpikeDataset::new(counts, vec![], 1, 40, 3, 0, 0.05).unwrap();
        let init = initialize(&ds, 1, &HoldoutMask::none(1, 40)).unwrap();
        let c = init.loading.column(0);
        assert!((c[0] - c[1]).abs() < 1e-12 && c[0] > 0.0);
        assert!(c[2].abs() < 1e-12);
    }
}
