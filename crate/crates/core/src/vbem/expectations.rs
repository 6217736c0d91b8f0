//! Parameter posteriors and the moments of them consumed by the E-step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};
use crate::gp::GaussianBelief;
use crate::linalg::{unvec_row_major, vec_row_major};
use crate::model::{ModelIIParams, ModelIParams, SharedParams};

/// Expectations of the transition parameters under their posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsMoments {
    /// `E[A]`.
    pub a: DMatrix<f64>,
    /// `E[AᵀA]`.
    pub ata: DMatrix<f64>,
    /// `E[B]`.
    pub b: DMatrix<f64>,
    /// `E[AᵀB]`.
    pub atb: DMatrix<f64>,
}

impl DynamicsMoments {
    pub fn point_mass(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Self {
        Self {
            a: a.clone(),
            ata: a.transpose() * a,
            b: b.clone(),
            atb: a.transpose() * b,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Gaussian posterior over `[A B]` (`k x (k+d)`) whose rows are independent
/// and share one covariance, as produced by a regression with identity noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPosterior {
    pub mean: DMatrix<f64>,
    pub row_cov: DMatrix<f64>,
}

impl DynamicsPosterior {
    pub fn point_mass(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Self {
        let k = a.nrows();
        let cols = k + b.ncols();
        let mut mean = DMatrix::zeros(k, cols);
        mean.view_mut((0, 0), (k, k)).copy_from(a);
        mean.view_mut((0, k), (k, b.ncols())).copy_from(b);
        Self {
            mean,
            row_cov: DMatrix::zeros(cols, cols),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.ncols() - self.mean.nrows()
    }

    pub fn dynamics(&self) -> DMatrix<f64> {
        let k = self.latent_dim();
        self.mean.view((0, 0), (k, k)).into_owned()
    }

    pub fn input_map(&self) -> DMatrix<f64> {
        let k = self.latent_dim();
        self.mean.view((0, k), (k, self.input_dim())).into_owned()
    }

    pub fn moments(&self) -> DynamicsMoments {
        let k = self.latent_dim();
        let d = self.input_dim();
        let a = self.dynamics();
        let b = self.input_map();
        let kf = k as f64;
        let ata = a.transpose() * &a + self.row_cov.view((0, 0), (k, k)) * kf;
        let atb = a.transpose() * &b + self.row_cov.view((0, k), (k, d)) * kf;
        DynamicsMoments { a, ata, b, atb }
    }

    /// Joint belief over `(vec A, vec B)`, both row-major.
    pub fn to_belief(&self) -> GaussianBelief {
        let k = self.latent_dim();
        let d = self.input_dim();
        let n = k * (k + d);
        let index = |row: usize, col: usize| {
            if col < k {
                row * k + col
            } else {
                k * k + row * d + (col - k)
            }
        };
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for row in 0..k {
            for c1 in 0..k + d {
                mean[index(row, c1)] = self.mean[(row, c1)];
                for c2 in 0..k + d {
                    cov[(index(row, c1), index(row, c2))] = self.row_cov[(c1, c2)];
                }
            }
        }
        GaussianBelief { mean, cov }
    }
}

/// Gaussian posterior over the stacked `r·k` modulators (trial-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulatorPosterior {
    pub latent_dim: usize,
    pub belief: GaussianBelief,
    /// Per-trial likelihood precision `H_h^(i)` at the posterior mean.
    pub lik_precision: Vec<DMatrix<f64>>,
}

impl ModulatorPosterior {
    pub fn zero(num_trials: usize, latent_dim: usize) -> Self {
        Self {
            latent_dim,
            belief: GaussianBelief::point_mass(DVector::zeros(num_trials * latent_dim)),
            lik_precision: vec![DMatrix::zeros(latent_dim, latent_dim); num_trials],
        }
    }

    pub fn num_trials(&self) -> usize {
        self.lik_precision.len()
    }

    pub fn trial_marginal(&self, trial: usize) -> GaussianBelief {
        self.belief.marginal(trial * self.latent_dim, self.latent_dim)
    }

    /// `r x k` matrix of posterior means.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let k = self.latent_dim;
        DMatrix::from_fn(self.num_trials(), k, |i, l| self.belief.mean[i * k + l])
    }

    /// Block-diagonal `H_h` over all trials.
    pub fn stacked_lik_precision(&self) -> DMatrix<f64> {
        block_diagonal(&self.lik_precision)
    }
}

pub(crate) fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let m = b.nrows();
        out.view_mut((off, off), (m, m)).copy_from(b);
        off += m;
    }
    out
}

/// Per-trial dynamics posterior of Model II.
///
/// Rows of `A^(i)` are a-posteriori independent of each other and share the
/// same `(r·k) x (r·k)` covariance across trials, because every row sees the
/// same regressors `x_{t−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTrialDynamicsPosterior {
    pub latent_dim: usize,
    /// `ā`, row-major `k²`.
    pub mean_dynamics: DVector<f64>,
    /// `r x k²`; row `i` is the posterior mean of `vec A^(i)`.
    pub means: DMatrix<f64>,
    /// Covariance of `(a_l^(1), ..., a_l^(r))` for any row `l`, trial-major.
    pub row_cov: DMatrix<f64>,
    /// Per-trial `S_i = Σ_t E[x_{t−1} x_{t−1}ᵀ]`; `H_a^(i) = I_k ⊗ S_i`.
    pub lik_precision: Vec<DMatrix<f64>>,
    /// Posterior over `B`, rows independent with shared covariance.
    pub input_mean: DMatrix<f64>,
    pub input_row_cov: DMatrix<f64>,
}

impl PerTrialDynamicsPosterior {
    /// Every trial at `dynamics`, no uncertainty.
    pub fn point_mass(num_trials: usize, dynamics: &DMatrix<f64>, input_map: &DMatrix<f64>) -> Self {
        let k = dynamics.nrows();
        let a = vec_row_major(dynamics);
        let d = input_map.ncols();
        Self {
            latent_dim: k,
            mean_dynamics: a.clone(),
            means: DMatrix::from_fn(num_trials, k * k, |_, c| a[c]),
            row_cov: DMatrix::zeros(num_trials * k, num_trials * k),
            lik_precision: vec![DMatrix::zeros(k, k); num_trials],
            input_mean: input_map.clone(),
            input_row_cov: DMatrix::zeros(d, d),
        }
    }

    pub fn num_trials(&self) -> usize {
        self.means.nrows()
    }

    pub fn trial_dynamics(&self, trial: usize) -> DMatrix<f64> {
        let k = self.latent_dim;
        DMatrix::from_fn(k, k, |row, col| self.means[(trial, row * k + col)])
    }

    /// Covariance of one row of `A^(i)`.
    fn row_block(&self, trial: usize) -> DMatrix<f64> {
        let k = self.latent_dim;
        self.row_cov.view((trial * k, trial * k), (k, k)).into_owned()
    }

    pub fn trial_moments(&self, trial: usize) -> DynamicsMoments {
        let k = self.latent_dim;
        let a = self.trial_dynamics(trial);
        let ata = a.transpose() * &a + self.row_block(trial) * k as f64;
        let b = self.input_mean.clone();
        let atb = a.transpose() * &b;
        DynamicsMoments { a, ata, b, atb }
    }

    /// Marginal belief over `vec A^(i)`.
    pub fn trial_marginal(&self, trial: usize) -> GaussianBelief {
        let k = self.latent_dim;
        let block = self.row_block(trial);
        let mut cov = DMatrix::zeros(k * k, k * k);
        for l in 0..k {
            cov.view_mut((l * k, l * k), (k, k)).copy_from(&block);
        }
        GaussianBelief {
            mean: self.means.row(trial).transpose(),
            cov,
        }
    }

    /// Dense belief over the stacked `r·k²` vector (trial-major, row-major within a trial).
    pub fn to_belief(&self) -> GaussianBelief {
        let k = self.latent_dim;
        let r = self.num_trials();
        let kk = k * k;
        let n = r * kk;
        let mean = DVector::from_fn(n, |idx, _| self.means[(idx / kk, idx % kk)]);
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..r {
            for j in 0..r {
                for l in 0..k {
                    for c1 in 0..k {
                        for c2 in 0..k {
                            cov[(i * kk + l * k + c1, j * kk + l * k + c2)] = self.row_cov[(i * k + c1, j * k + c2)];
                        }
                    }
                }
            }
        }
        GaussianBelief { mean, cov }
    }
}

/// The trial-varying part of the parameter posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LatentParams {
    /// Shared `q(A, B)` and per-trial modulators.
    ModelI {
        dynamics: DynamicsPosterior,
        modulators: ModulatorPosterior,
    },
    /// Per-trial dynamics.
    ModelII { dynamics: PerTrialDynamicsPosterior },
}

/// Posterior over all parameters; `C` and `d` are point estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPosterior {
    pub loading: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub latent: LatentParams,
}

/// Everything the E-step of one trial needs.
#[derive(Debug, Clone)]
pub struct TrialExpectations {
    pub dynamics: DynamicsMoments,
    /// `d + C E[h] + ½ diag(C Cov[h] Cᵀ)`, so that `exp(c_jᵀx + d_eff_j) = E_h[exp(c_jᵀ(x + h) + d_j)]`.
    pub effective_offset: DVector<f64>,
}

/// Lognormal identity applied to a Gaussian modulator belief.
pub fn effective_offset(loading: &DMatrix<f64>, offset: &DVector<f64>, h: &GaussianBelief) -> DVector<f64> {
    let ch = loading * &h.cov;
    DVector::from_fn(offset.len(), |j, _| {
        let var = ch.row(j).dot(&loading.row(j));
        offset[j] + loading.row(j).dot(&h.mean.transpose()) + 0.5 * var
    })
}

impl ParamPosterior {
    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    pub fn num_trials(&self) -> usize {
        match &self.latent {
            LatentParams::ModelI { modulators, .. } => modulators.num_trials(),
            LatentParams::ModelII { dynamics } => dynamics.num_trials(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.latent {
            LatentParams::ModelI { dynamics, .. } => dynamics.input_dim(),
            LatentParams::ModelII { dynamics } => dynamics.input_mean.ncols(),
        }
    }

    /// Moments for trial `i` (position within the fitted dataset).
    pub fn expected_param_stats(&self, trial: usize) -> Result<TrialExpectations> {
        ensure_shape!(trial < self.num_trials(), "trial {trial} out of range");
        Ok(match &self.latent {
            LatentParams::ModelI { dynamics, modulators } => TrialExpectations {
                dynamics: dynamics.moments(),
                effective_offset: effective_offset(&self.loading, &self.offset, &modulators.trial_marginal(trial)),
            },
            LatentParams::ModelII { dynamics } => TrialExpectations {
                dynamics: dynamics.trial_moments(trial),
                effective_offset: self.offset.clone(),
            },
        })
    }

    /// Posterior-mean parameters in Model I form (modulators zero for Model II).
    pub fn point_model1(&self) -> Result<ModelIParams> {
        match &self.latent {
            LatentParams::ModelI { dynamics, modulators } => {
                let shared = SharedParams::new(dynamics.dynamics(), dynamics.input_map(), self.loading.clone(), self.offset.clone())?;
                ModelIParams::new(shared, modulators.mean_matrix())
            }
            LatentParams::ModelII { dynamics } => {
                let a = unvec_row_major(dynamics.mean_dynamics.as_slice(), dynamics.latent_dim, dynamics.latent_dim)?;
                let shared = SharedParams::new(a, dynamics.input_mean.clone(), self.loading.clone(), self.offset.clone())?;
                ModelIParams::new(shared, DMatrix::zeros(dynamics.num_trials(), dynamics.latent_dim))
            }
        }
    }

    /// Posterior-mean parameters in Model II form (constant dynamics for Model I).
    pub fn point_model2(&self) -> Result<ModelIIParams> {
        match &self.latent {
            LatentParams::ModelI { dynamics, modulators } => {
                let a = vec_row_major(&dynamics.dynamics());
                let r = modulators.num_trials();
                let per = DMatrix::from_fn(r, a.len(), |_, c| a[c]);
                ModelIIParams::new(dynamics.input_map(), self.loading.clone(), self.offset.clone(), a, per)
            }
            LatentParams::ModelII { dynamics } => ModelIIParams::new(
                dynamics.input_mean.clone(),
                self.loading.clone(),
                self.offset.clone(),
                dynamics.mean_dynamics.clone(),
                dynamics.means.clone(),
            ),
        }
    }
}
