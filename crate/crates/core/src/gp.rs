//! Squared-exponential prior over trial-indexed parameter blocks.
//!
//! The kernel between trials `i` and `j` is
//! `(σ² + ε δ_ij) exp(−(i − j)² / (2τ²)) I_m`, so the full covariance is
//! `K_scalar ⊗ I_m` with an `r x r` scalar factor. Only the scalar factor is
//! ever factorized; the dense `(r·m) x (r·m)` matrix is materialized on demand.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::linalg::{cholesky_jittered, kron_identity, logdet_spd, spd_inverse, symmetrize};
use crate::model::Hyperparams;

/// Mean/covariance pair used for messages, marginals and parameter posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        ensure_shape!(cov.shape() == (n, n), "covariance must be {n}x{n}");
        let scale = cov.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::Numeric(format!(
                        "covariance not symmetric at ({i},{j}): {} vs {}",
                        cov[(i, j)],
                        cov[(j, i)]
                    )));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    /// Zero-covariance belief centred on `mean`.
    pub fn point_mass(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal over a contiguous index range.
    pub fn marginal(&self, start: usize, len: usize) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.rows(start, len).into_owned(),
            cov: self.cov.view((start, start), (len, len)).into_owned(),
        }
    }
}

/// Materialized block kernel over a set of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockKernel {
    pub sigma2: f64,
    pub tau2: f64,
    pub eps: f64,
    pub trial_ids: Vec<u32>,
    pub block_dim: usize,
    /// `r x r` scalar factor.
    pub scalar: DMatrix<f64>,
}

impl BlockKernel {
    pub fn num_trials(&self) -> usize {
        self.trial_ids.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma2 == 0.0 && self.eps == 0.0
    }

    /// Dense `(r·m) x (r·m)` matrix, trial-major ordering.
    pub fn full(&self) -> DMatrix<f64> {
        kron_identity(&self.scalar, self.block_dim)
    }

    pub fn scalar_inverse(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.scalar)
    }
}

fn kernel_entry(sigma2: f64, tau2: f64, eps: f64, a: u32, b: u32) -> f64 {
    let diff = a as f64 - b as f64;
    let amp = if a == b { sigma2 + eps } else { sigma2 };
    if amp == 0.0 {
        return 0.0;
    }
    amp * (-diff * diff / (2.0 * tau2)).exp()
}

/// Scalar kernel between two (possibly overlapping) sets of trial ids.
pub fn scalar_cross_kernel(hyper: &Hyperparams, rows: &[u32], cols: &[u32]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        kernel_entry(hyper.sigma2, hyper.tau2, hyper.eps, rows[i], cols[j])
    })
}

pub fn build_kernel(hyper: &Hyperparams, trial_ids: &[u32], block_dim: usize) -> Result<BlockKernel> {
    if block_dim == 0 {
        return Err(Error::Domain("kernel block dimension must be >= 1".into()));
    }
    if !(hyper.sigma2 >= 0.0) {
        return Err(Error::Domain(format!("sigma2 must be >= 0, got {}", hyper.sigma2)));
    }
    if !(hyper.tau2 > 0.0) {
        return Err(Error::Domain(format!("tau2 must be > 0, got {}", hyper.tau2)));
    }
    if trial_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("trial indices must be strictly increasing".into()));
    }
    let scalar = scalar_cross_kernel(hyper, trial_ids, trial_ids);
    Ok(BlockKernel {
        sigma2: hyper.sigma2,
        tau2: hyper.tau2,
        eps: hyper.eps,
        trial_ids: trial_ids.to_vec(),
        block_dim,
        scalar,
    })
}

/// `KL(post ‖ prior)` between two multivariate normals.
pub fn kl_gaussian(post: &GaussianBelief, prior: &GaussianBelief) -> Result<f64> {
    let n = post.dim();
    ensure_shape!(prior.dim() == n, "KL operands have dimensions {n} and {}", prior.dim());
    if n == 0 {
        return Ok(0.0);
    }
    let prior_chol = prior
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("prior covariance is not positive definite".into()))?;
    let logdet_prior = 2.0 * prior_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet_post = logdet_spd(&post.cov)?;
    let trace = prior_chol.solve(&post.cov).trace();
    let diff = &post.mean - &prior.mean;
    let maha = diff.dot(&prior_chol.solve(&diff));
    Ok(0.5 * (logdet_prior - logdet_post + trace + maha - n as f64))
}

/// Second-moment summary of a Gaussian posterior over a Kronecker-structured block.
///
/// For posterior `N(μ, Σ)` over `r·m` stacked values (trial-major) and prior
/// mean `μ₀`, stores `S = Σ̃ + M Mᵀ`, with `M` the `r x m` matrix of
/// `μ − μ₀` and `Σ̃_ij = Σ_l Σ_(i,l),(j,l)`, together with `log |Σ|`.
#[derive(Debug, Clone)]
pub struct KroneckerMoments {
    pub second_moment: DMatrix<f64>,
    pub logdet_post: f64,
    pub block_dim: usize,
}

impl KroneckerMoments {
    pub fn from_dense(post: &GaussianBelief, prior_mean: &DVector<f64>, block_dim: usize) -> Result<Self> {
        let n = post.dim();
        ensure_shape!(n.is_multiple_of(block_dim), "dimension {n} not divisible by block {block_dim}");
        ensure_shape!(prior_mean.len() == n, "prior mean length mismatch");
        let r = n / block_dim;
        let diff = &post.mean - prior_mean;
        let mut s = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                let mut acc = 0.0;
                for l in 0..block_dim {
                    let (a, b) = (i * block_dim + l, j * block_dim + l);
                    acc += post.cov[(a, b)] + diff[a] * diff[b];
                }
                s[(i, j)] = acc;
            }
        }
        Ok(Self {
            second_moment: s,
            logdet_post: logdet_spd(&post.cov)?,
            block_dim,
        })
    }

    pub fn num_trials(&self) -> usize {
        self.second_moment.nrows()
    }
}

/// KL divergence from a Kronecker-structured posterior to the prior `N(μ₀, K_scalar ⊗ I_m)`.
///
/// Only `r x r` factorizations are needed.
pub fn kl_kronecker(moments: &KroneckerMoments, kernel_scalar: &DMatrix<f64>) -> Result<f64> {
    let r = moments.num_trials();
    ensure_shape!(kernel_scalar.shape() == (r, r), "kernel must be {r}x{r}");
    let m = moments.block_dim as f64;
    let chol = kernel_scalar
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("kernel is not positive definite".into()))?;
    let logdet_k = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol.solve(&moments.second_moment).trace();
    Ok(0.5 * (m * logdet_k - moments.logdet_post + trace - m * r as f64))
}

/// Predictive distribution of held-out blocks given a Gaussian posterior on training blocks.
///
/// `mean = m₀* + K* K⁻¹ (μ − m₀)` and
/// `cov = K** − K* K⁻¹ (K − Σ_post) K⁻¹ K*ᵀ` with `Σ_post = (K⁻¹ + H)⁻¹`,
/// which equals `K** − K* (K + H⁻¹)⁻¹ K*ᵀ` without ever inverting `H`.
#[allow(clippy::too_many_arguments)]
pub fn gp_predict(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_test: &DMatrix<f64>,
    posterior_mean: &DVector<f64>,
    prior_mean_train: &DVector<f64>,
    prior_mean_test: &DVector<f64>,
    lik_precision: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let n = k_train.nrows();
    let n_star = k_test.nrows();
    ensure_shape!(k_train.shape() == (n, n), "training kernel must be square");
    ensure_shape!(k_cross.shape() == (n_star, n), "cross kernel must be {n_star}x{n}");
    ensure_shape!(k_test.shape() == (n_star, n_star), "test kernel must be square");
    ensure_shape!(posterior_mean.len() == n, "posterior mean length mismatch");
    ensure_shape!(prior_mean_train.len() == n, "training prior mean length mismatch");
    ensure_shape!(prior_mean_test.len() == n_star, "test prior mean length mismatch");
    ensure_shape!(lik_precision.shape() == (n, n), "likelihood precision must be {n}x{n}");

    let chol = cholesky_jittered(k_train)?;
    let k_inv = chol.inverse();
    // W = K⁻¹ K*ᵀ
    let w = chol.solve(&k_cross.transpose());
    let mean = prior_mean_test + w.transpose() * (posterior_mean - prior_mean_train);

    let mut post_precision = &k_inv + lik_precision;
    symmetrize(&mut post_precision);
    let post_cov = spd_inverse(&post_precision)?;
    let mut cov = k_test - w.transpose() * (k_train - post_cov) * &w;
    symmetrize(&mut cov);
    GaussianBelief::new(mean, cov)
}
