//! Forward/backward message passing over the latent path of one trial.
//!
//! Messages are kept in information form `(J, h)`, i.e. `exp(−½ xᵀJx + hᵀx)`.
//! Each observed bin contributes a Gaussian site, computed by a Laplace step in
//! the forward filter; the backward pass reuses those sites so that the
//! smoothed marginals and pairwise joints are mutually consistent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::gp::GaussianBelief;
use crate::linalg::{spd_inverse, symmetrize};

use super::expectations::DynamicsMoments;
use super::laplace::{newton_maximize, Evaluation, NewtonSettings};

/// Observation model of a trial.
#[derive(Debug, Clone)]
pub enum Emission<'a> {
    /// `y_tj ~ Poisson(exp(c_jᵀ x_t + d_j))`, counts `T x p` row-major.
    Poisson {
        loading: &'a DMatrix<f64>,
        offset: DVector<f64>,
        counts: &'a [u32],
    },
    /// `y_t ~ N(C x_t + d, R)`; exact linear-Gaussian reference model.
    Gaussian {
        loading: &'a DMatrix<f64>,
        offset: DVector<f64>,
        noise_precision: DMatrix<f64>,
        /// `T x p`.
        observations: &'a DMatrix<f64>,
    },
}

impl Emission<'_> {
    fn loading(&self) -> &DMatrix<f64> {
        match self {
            Emission::Poisson { loading, .. } | Emission::Gaussian { loading, .. } => loading,
        }
    }
}

/// One trial's data as seen by the E-step.
#[derive(Debug, Clone)]
pub struct TrialInput<'a> {
    pub emission: Emission<'a>,
    /// `T x d` stimulus.
    pub stimulus: &'a DMatrix<f64>,
    /// Bins withheld from inference (no emission site), length `T`.
    pub held_out: Option<&'a [bool]>,
}

impl TrialInput<'_> {
    pub fn num_bins(&self) -> usize {
        self.stimulus.nrows()
    }

    pub fn is_held_out(&self, t: usize) -> bool {
        self.held_out.is_some_and(|m| m[t])
    }

    fn validate(&self, moments: &DynamicsMoments) -> Result<()> {
        let k = moments.latent_dim();
        let t_len = self.num_bins();
        let c = self.emission.loading();
        ensure_shape!(c.ncols() == k, "loading has {} columns, latent dimension is {k}", c.ncols());
        ensure_shape!(
            self.stimulus.ncols() == moments.b.ncols(),
            "stimulus has {} columns, input map has {}",
            self.stimulus.ncols(),
            moments.b.ncols()
        );
        if let Some(m) = self.held_out {
            ensure_shape!(m.len() == t_len, "held-out mask must have {t_len} entries");
        }
        match &self.emission {
            Emission::Poisson { counts, offset, .. } => {
                ensure_shape!(counts.len() == t_len * c.nrows(), "counts must be T x p");
                ensure_shape!(offset.len() == c.nrows(), "offset must have p entries");
            }
            Emission::Gaussian {
                offset,
                noise_precision,
                observations,
                ..
            } => {
                ensure_shape!(observations.shape() == (t_len, c.nrows()), "observations must be T x p");
                ensure_shape!(offset.len() == c.nrows(), "offset must have p entries");
                ensure_shape!(noise_precision.shape() == (c.nrows(), c.nrows()), "noise precision must be p x p");
            }
        }
        Ok(())
    }
}

/// Gaussian factor `exp(−½ xᵀJx + hᵀx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoMessage {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl InfoMessage {
    pub fn flat(k: usize) -> Self {
        Self {
            precision: DMatrix::zeros(k, k),
            shift: DVector::zeros(k),
        }
    }

    pub fn to_belief(&self) -> Result<GaussianBelief> {
        let cov = spd_inverse(&self.precision)?;
        let mean = &cov * &self.shift;
        Ok(GaussianBelief { mean, cov })
    }

    fn combine(&self, other: &InfoMessage) -> InfoMessage {
        InfoMessage {
            precision: &self.precision + &other.precision,
            shift: &self.shift + &other.shift,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardMessages {
    /// Filtered `α_t` for `t = 0..=T` in information form.
    pub filtered_info: Vec<InfoMessage>,
    pub filtered: Vec<GaussianBelief>,
    /// One-step predictions of `x_t` for `t = 1..=T` (index `t − 1`).
    pub predicted: Vec<GaussianBelief>,
    /// Emission sites for `t = 1..=T` (index `t − 1`); flat when held out.
    pub sites: Vec<InfoMessage>,
}

/// Smoothed moments of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLatents {
    /// `m_t`, `t = 0..=T`.
    pub means: Vec<DVector<f64>>,
    /// `V_t`, `t = 0..=T`.
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(x_t, x_{t+1})`, `t = 0..T`.
    pub cross_covs: Vec<DMatrix<f64>>,
}

impl TrialLatents {
    pub fn num_bins(&self) -> usize {
        self.cross_covs.len()
    }

    /// `E[x_t x_tᵀ]`.
    pub fn second_moment(&self, t: usize) -> DMatrix<f64> {
        &self.covs[t] + &self.means[t] * self.means[t].transpose()
    }

    /// `E[x_{t+1} x_tᵀ]`.
    pub fn lag_moment(&self, t: usize) -> DMatrix<f64> {
        self.cross_covs[t].transpose() + &self.means[t + 1] * self.means[t].transpose()
    }
}

/// Step `α_{t−1} → α_t⁻`: integrate the expected transition potential over `x_{t−1}`.
fn propagate(prev: &InfoMessage, moments: &DynamicsMoments, u: &DVector<f64>) -> Result<InfoMessage> {
    let k = moments.latent_dim();
    let m_inv = spd_inverse(&(&prev.precision + &moments.ata))?;
    let a_m_inv = &moments.a * &m_inv;
    let mut precision = DMatrix::identity(k, k) - &a_m_inv * moments.a.transpose();
    symmetrize(&mut precision);
    let shift = &moments.b * u + a_m_inv * (&prev.shift - &moments.atb * u);
    Ok(InfoMessage { precision, shift })
}

/// Quadratic expansion of the Poisson log-likelihood at `x̄`.
fn poisson_site_at(loading: &DMatrix<f64>, offset: &DVector<f64>, y: &[u32], x_bar: &DVector<f64>) -> InfoMessage {
    let eta = loading * x_bar + offset;
    let lambda = eta.map(f64::exp);
    let weighted = DMatrix::from_fn(loading.nrows(), loading.ncols(), |j, c| lambda[j] * loading[(j, c)]);
    let mut precision = loading.transpose() * weighted;
    symmetrize(&mut precision);
    let resid = DVector::from_fn(y.len(), |j, _| y[j] as f64 - lambda[j]);
    let shift = &precision * x_bar + loading.transpose() * resid;
    InfoMessage { precision, shift }
}

fn gaussian_site(loading: &DMatrix<f64>, offset: &DVector<f64>, r_inv: &DMatrix<f64>, y: DVector<f64>) -> InfoMessage {
    let ct_rinv = loading.transpose() * r_inv;
    let mut precision = &ct_rinv * loading;
    symmetrize(&mut precision);
    InfoMessage {
        precision,
        shift: ct_rinv * (y - offset),
    }
}

/// Log-density `log pred(x) + Σ_j [y_j η_j − exp(η_j)]`, `η = Cx + d`, whose
/// mode and curvature define a Poisson site.
pub fn poisson_site_objective<'a>(
    pred: &'a InfoMessage,
    loading: &'a DMatrix<f64>,
    offset: &'a DVector<f64>,
    y: &'a [u32],
) -> impl Fn(&DVector<f64>, bool) -> Evaluation + 'a {
    let yv = DVector::from_fn(y.len(), |j, _| y[j] as f64);
    move |x: &DVector<f64>, full: bool| {
        let eta = loading * x + offset;
        let lambda = eta.map(f64::exp);
        let jx = &pred.precision * x;
        let value = -0.5 * x.dot(&jx) + pred.shift.dot(x) + yv.dot(&eta) - lambda.sum();
        if !full {
            return Evaluation {
                value,
                gradient: DVector::zeros(0),
                hessian: DMatrix::zeros(0, 0),
            };
        }
        let gradient = -jx + &pred.shift + loading.transpose() * (&yv - &lambda);
        let weighted = DMatrix::from_fn(loading.nrows(), loading.ncols(), |j, c| lambda[j] * loading[(j, c)]);
        let hessian = -&pred.precision - loading.transpose() * weighted;
        Evaluation {
            value,
            gradient,
            hessian,
        }
    }
}

/// Laplace step: the Gaussian site whose product with `pred` matches the mode and
/// curvature of `pred × Poisson(y | exp(Cx + d))`.
fn poisson_site(
    pred: &InfoMessage,
    loading: &DMatrix<f64>,
    offset: &DVector<f64>,
    y: &[u32],
    init: DVector<f64>,
    newton: &NewtonSettings,
) -> Result<InfoMessage> {
    let mode = newton_maximize(poisson_site_objective(pred, loading, offset, y), init, newton)?;
    Ok(poisson_site_at(loading, offset, y, &mode.point))
}

fn emission_site(
    input: &TrialInput,
    t: usize,
    pred: &InfoMessage,
    pred_mean: &DVector<f64>,
    newton: &NewtonSettings,
) -> Result<InfoMessage> {
    let k = pred.precision.nrows();
    if input.is_held_out(t) {
        return Ok(InfoMessage::flat(k));
    }
    match &input.emission {
        Emission::Poisson { loading, offset, counts } => {
            let p = loading.nrows();
            let y = &counts[t * p..(t + 1) * p];
            poisson_site(pred, loading, offset, y, pred_mean.clone(), newton)
        }
        Emission::Gaussian {
            loading,
            offset,
            noise_precision,
            observations,
        } => Ok(gaussian_site(loading, offset, noise_precision, observations.row(t).transpose())),
    }
}

fn run_forward(
    input: &TrialInput,
    moments: &DynamicsMoments,
    fixed_sites: Option<&[InfoMessage]>,
    newton: &NewtonSettings,
) -> Result<ForwardMessages> {
    input.validate(moments)?;
    let k = moments.latent_dim();
    let t_len = input.num_bins();
    let alpha0 = InfoMessage {
        precision: DMatrix::identity(k, k),
        shift: DVector::zeros(k),
    };
    let mut filtered = vec![alpha0.to_belief()?];
    let mut filtered_info = vec![alpha0];
    let mut predicted = Vec::with_capacity(t_len);
    let mut sites = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let u = input.stimulus.row(t).transpose();
        let pred = propagate(&filtered_info[t], moments, &u)?;
        let pred_belief = pred.to_belief()?;
        let site = match fixed_sites {
            Some(s) => s[t].clone(),
            None => emission_site(input, t, &pred, &pred_belief.mean, newton)?,
        };
        let post = pred.combine(&site);
        filtered.push(post.to_belief()?);
        filtered_info.push(post);
        predicted.push(pred_belief);
        sites.push(site);
    }
    Ok(ForwardMessages {
        filtered_info,
        filtered,
        predicted,
        sites,
    })
}

/// Forward filter: `α₀ = N(0, I)`, then Gaussian propagation through the expected
/// dynamics followed by a Laplace step on each observed bin.
pub fn forward_pass(input: &TrialInput, moments: &DynamicsMoments, newton: &NewtonSettings) -> Result<ForwardMessages> {
    run_forward(input, moments, None, newton)
}

/// Backward messages `β_t`, `t = 0..=T`, with `β_T` flat.
pub fn backward_pass(input: &TrialInput, moments: &DynamicsMoments, forward: &ForwardMessages) -> Result<Vec<InfoMessage>> {
    let k = moments.latent_dim();
    let t_len = input.num_bins();
    ensure_shape!(forward.sites.len() == t_len, "forward messages do not match the trial length");
    let mut beta = vec![InfoMessage::flat(k); t_len + 1];
    for t in (1..=t_len).rev() {
        let u = input.stimulus.row(t - 1).transpose();
        let site = &forward.sites[t - 1];
        let n_inv = spd_inverse(&(DMatrix::identity(k, k) + &site.precision + &beta[t].precision))?;
        let at_n_inv = moments.a.transpose() * &n_inv;
        let mut precision = &moments.ata - &at_n_inv * &moments.a;
        symmetrize(&mut precision);
        let shift = -(&moments.atb * &u) + at_n_inv * (&moments.b * &u + &site.shift + &beta[t].shift);
        beta[t - 1] = InfoMessage { precision, shift };
    }
    Ok(beta)
}

/// Smoothed marginals `α_t β_t` and lag-one cross-covariances from the pairwise joint.
pub fn smoothed_statistics(
    input: &TrialInput,
    moments: &DynamicsMoments,
    forward: &ForwardMessages,
    backward: &[InfoMessage],
) -> Result<TrialLatents> {
    let k = moments.latent_dim();
    let t_len = input.num_bins();
    ensure_shape!(backward.len() == t_len + 1, "backward messages do not match the trial length");
    let mut means = Vec::with_capacity(t_len + 1);
    let mut covs = Vec::with_capacity(t_len + 1);
    for (filtered, back) in forward.filtered_info.iter().zip(backward) {
        let b = filtered.combine(back).to_belief()?;
        means.push(b.mean);
        covs.push(b.cov);
    }
    let mut cross_covs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let site = &forward.sites[t];
        let mut joint = DMatrix::zeros(2 * k, 2 * k);
        joint
            .view_mut((0, 0), (k, k))
            .copy_from(&(&forward.filtered_info[t].precision + &moments.ata));
        joint.view_mut((0, k), (k, k)).copy_from(&(-moments.a.transpose()));
        joint.view_mut((k, 0), (k, k)).copy_from(&(-&moments.a));
        joint
            .view_mut((k, k), (k, k))
            .copy_from(&(DMatrix::identity(k, k) + &site.precision + &backward[t + 1].precision));
        let cov = spd_inverse(&joint).map_err(|e| Error::Numeric(format!("pairwise joint at t={t}: {e}")))?;
        cross_covs.push(cov.view((0, k), (k, k)).into_owned());
    }
    Ok(TrialLatents {
        means,
        covs,
        cross_covs,
    })
}

/// Forward filter, backward pass and smoothing for one trial.
///
/// With `relinearize > 0`, Poisson sites are re-expanded at the smoothed means
/// and the passes repeated; at a fixed point the smoothed means are the joint
/// posterior mode.
pub fn infer_trial(
    input: &TrialInput,
    moments: &DynamicsMoments,
    newton: &NewtonSettings,
    relinearize: usize,
) -> Result<(ForwardMessages, TrialLatents)> {
    let mut forward = forward_pass(input, moments, newton)?;
    let mut backward = backward_pass(input, moments, &forward)?;
    let mut latents = smoothed_statistics(input, moments, &forward, &backward)?;
    if let Emission::Poisson { loading, offset, counts } = &input.emission {
        let p = loading.nrows();
        for _ in 0..relinearize {
            let sites: Vec<InfoMessage> = (0..input.num_bins())
                .map(|t| {
                    if input.is_held_out(t) {
                        InfoMessage::flat(moments.latent_dim())
                    } else {
                        poisson_site_at(loading, offset, &counts[t * p..(t + 1) * p], &latents.means[t + 1])
                    }
                })
                .collect();
            forward = run_forward(input, moments, Some(&sites), newton)?;
            backward = backward_pass(input, moments, &forward)?;
            latents = smoothed_statistics(input, moments, &forward, &backward)?;
        }
    }
    Ok((forward, latents))
}
