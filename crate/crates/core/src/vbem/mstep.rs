//! Parameter updates given the smoothed latent moments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ensure_shape, Error, Result};
use crate::gp::{BlockKernel, GaussianBelief};
use crate::linalg::{kron_identity, spd_inverse, symmetrize};
use crate::model::SpikeDataset;

use super::expectations::{DynamicsPosterior, ModulatorPosterior, PerTrialDynamicsPosterior};
use super::laplace::{newton_maximize, Evaluation, NewtonSettings};
use super::messages::TrialLatents;
use super::score::HoldoutMask;

/// Transition sufficient statistics of one trial, summed over `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStats {
    /// `Σ E[x_{t−1} x_{t−1}ᵀ]`.
    pub prev_prev: DMatrix<f64>,
    /// `Σ E[x_{t−1}] u_tᵀ`.
    pub prev_input: DMatrix<f64>,
    /// `Σ u_t u_tᵀ`.
    pub input_input: DMatrix<f64>,
    /// `Σ E[x_t x_{t−1}ᵀ]`.
    pub next_prev: DMatrix<f64>,
    /// `Σ E[x_t] u_tᵀ`.
    pub next_input: DMatrix<f64>,
}

impl TransitionStats {
    pub fn from_latents(latents: &TrialLatents, stimulus: &DMatrix<f64>) -> Result<Self> {
        let t_len = latents.num_bins();
        ensure_shape!(stimulus.nrows() == t_len, "stimulus has {} bins, latents {t_len}", stimulus.nrows());
        let k = latents.means[0].len();
        let d = stimulus.ncols();
        let mut s = Self {
            prev_prev: DMatrix::zeros(k, k),
            prev_input: DMatrix::zeros(k, d),
            input_input: DMatrix::zeros(d, d),
            next_prev: DMatrix::zeros(k, k),
            next_input: DMatrix::zeros(k, d),
        };
        for t in 1..=t_len {
            let u = stimulus.row(t - 1);
            s.prev_prev += latents.second_moment(t - 1);
            s.prev_input += &latents.means[t - 1] * u;
            s.input_input += u.transpose() * u;
            s.next_prev += latents.lag_moment(t - 1);
            s.next_input += &latents.means[t] * u;
        }
        Ok(s)
    }

    fn add(&mut self, other: &TransitionStats) {
        self.prev_prev += &other.prev_prev;
        self.prev_input += &other.prev_input;
        self.input_input += &other.input_input;
        self.next_prev += &other.next_prev;
        self.next_input += &other.next_input;
    }
}

fn summed(stats: &[TransitionStats]) -> Result<TransitionStats> {
    let mut iter = stats.iter();
    let mut total = iter
        .next()
        .ok_or_else(|| Error::Domain("no trials to update from".into()))?
        .clone();
    for s in iter {
        total.add(s);
    }
    Ok(total)
}

/// Exact Gaussian posterior over `[A B]` under ridge priors `φ_A`, `φ_B`.
pub fn vbm_update_dynamics(stats: &[TransitionStats], phi_a: f64, phi_b: f64) -> Result<DynamicsPosterior> {
    let s = summed(stats)?;
    let k = s.prev_prev.nrows();
    let d = s.input_input.nrows();
    let n = k + d;
    let mut precision = DMatrix::zeros(n, n);
    precision.view_mut((0, 0), (k, k)).copy_from(&s.prev_prev);
    precision.view_mut((0, k), (k, d)).copy_from(&s.prev_input);
    precision.view_mut((k, 0), (d, k)).copy_from(&s.prev_input.transpose());
    precision.view_mut((k, k), (d, d)).copy_from(&s.input_input);
    for i in 0..n {
        precision[(i, i)] += if i < k { phi_a } else { phi_b };
    }
    let mut cross = DMatrix::zeros(k, n);
    cross.view_mut((0, 0), (k, k)).copy_from(&s.next_prev);
    cross.view_mut((0, k), (k, d)).copy_from(&s.next_input);
    let row_cov = spd_inverse(&precision).map_err(|e| Error::Numeric(format!("dynamics precision: {e}")))?;
    Ok(DynamicsPosterior {
        mean: cross * &row_cov,
        row_cov,
    })
}

/// Gaussian posterior over the stacked per-trial dynamics under the prior
/// `a^(1:r) ~ N(1 ⊗ ā, K ⊗ I_{k²})`, with `B` held at `input_map`.
///
/// The returned `mean_dynamics` is the `ā` that was used as prior mean.
pub fn vbm_update_per_trial_dynamics(
    stats: &[TransitionStats],
    kernel: &BlockKernel,
    mean_dynamics: &DVector<f64>,
    input_map: &DMatrix<f64>,
    input_row_cov: &DMatrix<f64>,
) -> Result<PerTrialDynamicsPosterior> {
    let r = stats.len();
    ensure_shape!(r > 0, "no trials to update from");
    ensure_shape!(kernel.num_trials() == r, "kernel covers {} trials, data {r}", kernel.num_trials());
    let k = stats[0].prev_prev.nrows();
    ensure_shape!(mean_dynamics.len() == k * k, "mean dynamics must have k² entries");
    if kernel.is_degenerate() {
        return Err(Error::Domain("per-trial dynamics need a non-degenerate kernel".into()));
    }
    let k_inv = kernel.scalar_inverse()?;
    let mut precision = kron_identity(&k_inv, k);
    for (i, s) in stats.iter().enumerate() {
        let mut block = precision.view_mut((i * k, i * k), (k, k));
        block += &s.prev_prev;
    }
    symmetrize(&mut precision);
    let chol = crate::linalg::cholesky_jittered(&precision)?;
    let mut row_cov = chol.inverse();
    symmetrize(&mut row_cov);
    let k_inv_ones = &k_inv * DVector::from_element(r, 1.0);
    let mut means = DMatrix::zeros(r, k * k);
    for l in 0..k {
        let a_bar_l = mean_dynamics.rows(l * k, k);
        let b_l = input_map.row(l).transpose();
        let mut rhs = DVector::zeros(r * k);
        for (i, s) in stats.iter().enumerate() {
            let g = s.next_prev.row(l).transpose() - &s.prev_input * &b_l;
            let prior = a_bar_l * k_inv_ones[i];
            rhs.rows_mut(i * k, k).copy_from(&(g + prior));
        }
        let sol = chol.solve(&rhs);
        for i in 0..r {
            for c in 0..k {
                means[(i, l * k + c)] = sol[i * k + c];
            }
        }
    }
    Ok(PerTrialDynamicsPosterior {
        latent_dim: k,
        mean_dynamics: mean_dynamics.clone(),
        means,
        row_cov,
        lik_precision: stats.iter().map(|s| s.prev_prev.clone()).collect(),
        input_mean: input_map.clone(),
        input_row_cov: input_row_cov.clone(),
    })
}

/// `ā = Σ_i E[a^(i)] / (r + φ)`: the trial average pulled toward zero.
pub fn update_mean_dynamics(means: &DMatrix<f64>, phi: f64) -> DVector<f64> {
    let r = means.nrows() as f64;
    let sum = means.row_sum().transpose();
    sum / (r + phi)
}

/// Posterior over `B` given per-trial dynamics means: rows independent, shared covariance.
pub fn vbm_update_input_map(stats: &[TransitionStats], trial_dynamics: &[DMatrix<f64>], phi_b: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    ensure_shape!(stats.len() == trial_dynamics.len(), "one dynamics matrix per trial required");
    let k = stats[0].prev_prev.nrows();
    let d = stats[0].input_input.nrows();
    if d == 0 {
        return Ok((DMatrix::zeros(k, 0), DMatrix::zeros(0, 0)));
    }
    let mut precision = DMatrix::identity(d, d) * phi_b;
    let mut rhs = DMatrix::zeros(k, d);
    for (s, a) in stats.iter().zip(trial_dynamics) {
        precision += &s.input_input;
        rhs += &s.next_input - a * &s.prev_input;
    }
    let row_cov = spd_inverse(&precision)?;
    Ok((rhs * &row_cov, row_cov))
}

/// Mean and covariance of `x_t + h` for every observed `(trial, bin)` pair.
struct ObservedMoments {
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    /// `(trial, bin)` of each entry.
    index: Vec<(usize, usize)>,
}

fn observed_moments(latents: &[TrialLatents], modulators: Option<&ModulatorPosterior>, mask: &HoldoutMask) -> ObservedMoments {
    let mut out = ObservedMoments {
        means: Vec::new(),
        covs: Vec::new(),
        index: Vec::new(),
    };
    for (i, lat) in latents.iter().enumerate() {
        let h = modulators.map(|m| m.trial_marginal(i));
        for t in 0..lat.num_bins() {
            if mask.is_held_out(i, t) {
                continue;
            }
            let (mut m, mut v) = (lat.means[t + 1].clone(), lat.covs[t + 1].clone());
            if let Some(h) = &h {
                m += &h.mean;
                v += &h.cov;
            }
            out.means.push(m);
            out.covs.push(v);
            out.index.push((i, t));
        }
    }
    out
}

/// Penalized maximum of the expected Poisson log-likelihood over `(C, d)`.
///
/// Rows decouple, so each neuron is a `(k+1)`-dimensional Newton problem.
/// With `update_loading = false`, `C` stays at `init_loading` and only `d` moves.
#[allow(clippy::too_many_arguments)]
pub fn mle_update_loading(
    latents: &[TrialLatents],
    modulators: Option<&ModulatorPosterior>,
    dataset: &SpikeDataset,
    mask: &HoldoutMask,
    init_loading: &DMatrix<f64>,
    init_offset: &DVector<f64>,
    phi_c: f64,
    phi_d: f64,
    update_loading: bool,
    newton: &NewtonSettings,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = dataset.num_neurons();
    let k = init_loading.ncols();
    ensure_shape!(latents.len() == dataset.num_trials(), "one latent posterior per trial required");
    let obs = observed_moments(latents, modulators, mask);
    let rows: Vec<(DVector<f64>, f64)> = (0..p)
        .into_par_iter()
        .map(|j| {
            let y: Vec<f64> = obs.index.iter().map(|&(i, t)| dataset.count(i, t, j) as f64).collect();
            let c0 = init_loading.row(j).transpose();
            update_neuron(&obs, &y, c0, init_offset[j], phi_c, phi_d, update_loading, newton)
                .map_err(|e| Error::Numeric(format!("loading update for neuron {j}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loading = DMatrix::zeros(p, k);
    let mut offset = DVector::zeros(p);
    for (j, (c, d)) in rows.into_iter().enumerate() {
        loading.set_row(j, &c.transpose());
        offset[j] = d;
    }
    Ok((loading, offset))
}

/// Penalized expected Poisson log-likelihood of one neuron over `θ = (c, d)`:
/// `Σ_n [y_n (cᵀμ_n + d) − exp(cᵀμ_n + ½ cᵀV_n c + d)] − ½φ_C‖c‖² − ½φ_d d²`.
pub fn neuron_objective<'a>(
    means: &'a [DVector<f64>],
    covs: &'a [DMatrix<f64>],
    y: &'a [f64],
    phi_c: f64,
    phi_d: f64,
) -> impl Fn(&DVector<f64>, bool) -> Evaluation + 'a {
    let k = means.first().map_or(0, |m| m.len());
    let y_sum: f64 = y.iter().sum();
    let mut ym = DVector::zeros(k);
    for (yy, m) in y.iter().zip(means) {
        ym.axpy(*yy, m, 1.0);
    }
    move |theta: &DVector<f64>, full: bool| {
        let c = theta.rows(0, k).into_owned();
        let d = theta[k];
        let mut value = ym.dot(&c) + y_sum * d - 0.5 * phi_c * c.norm_squared() - 0.5 * phi_d * d * d;
        let mut gc = &ym - &c * phi_c;
        let mut gd = y_sum - phi_d * d;
        let mut hcc = DMatrix::identity(k, k) * (-phi_c);
        let mut hcd = DVector::zeros(k);
        let mut hdd = -phi_d;
        for (m, v) in means.iter().zip(covs) {
            let vc = v * &c;
            let lam = (c.dot(m) + 0.5 * c.dot(&vc) + d).exp();
            value -= lam;
            if full {
                let w = m + &vc;
                gc.axpy(-lam, &w, 1.0);
                gd -= lam;
                hcc -= (&w * w.transpose() + v) * lam;
                hcd.axpy(-lam, &w, 1.0);
                hdd -= lam;
            }
        }
        if !full {
            return Evaluation {
                value,
                gradient: DVector::zeros(0),
                hessian: DMatrix::zeros(0, 0),
            };
        }
        let mut gradient = DVector::zeros(k + 1);
        gradient.rows_mut(0, k).copy_from(&gc);
        gradient[k] = gd;
        let mut hessian = DMatrix::zeros(k + 1, k + 1);
        hessian.view_mut((0, 0), (k, k)).copy_from(&hcc);
        hessian.view_mut((0, k), (k, 1)).copy_from(&hcd);
        hessian.view_mut((k, 0), (1, k)).copy_from(&hcd.transpose());
        hessian[(k, k)] = hdd;
        Evaluation { value, gradient, hessian }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_neuron(
    obs: &ObservedMoments,
    y: &[f64],
    c0: DVector<f64>,
    d0: f64,
    phi_c: f64,
    phi_d: f64,
    update_loading: bool,
    newton: &NewtonSettings,
) -> Result<(DVector<f64>, f64)> {
    let k = c0.len();
    if !update_loading {
        // Only d moves; reuse the joint objective restricted to the last coordinate.
        let joint = neuron_objective(&obs.means, &obs.covs, y, phi_c, phi_d);
        let fixed = c0.clone();
        let objective = |theta: &DVector<f64>, full: bool| {
            let mut x = DVector::zeros(k + 1);
            x.rows_mut(0, k).copy_from(&fixed);
            x[k] = theta[0];
            let e = joint(&x, full);
            if !full {
                return e;
            }
            Evaluation {
                value: e.value,
                gradient: DVector::from_element(1, e.gradient[k]),
                hessian: DMatrix::from_element(1, 1, e.hessian[(k, k)]),
            }
        };
        let mode = newton_maximize(objective, DVector::from_element(1, d0), newton)?;
        return Ok((c0, mode.point[0]));
    }
    let mut init = DVector::zeros(k + 1);
    init.rows_mut(0, k).copy_from(&c0);
    init[k] = d0;
    let mode = newton_maximize(neuron_objective(&obs.means, &obs.covs, y, phi_c, phi_d), init, newton)?;
    Ok((mode.point.rows(0, k).into_owned(), mode.point[k]))
}

/// Per-trial, per-neuron aggregates entering the modulator objective:
/// `Y_ij = Σ_t y_ijt` and `w_ij = Σ_t E[exp(c_jᵀ x_t + d_j)]`, both over observed bins.
pub fn modulator_sufficient_stats(
    latents: &[TrialLatents],
    dataset: &SpikeDataset,
    mask: &HoldoutMask,
    loading: &DMatrix<f64>,
    offset: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = latents.len();
    let p = loading.nrows();
    let mut counts = DMatrix::zeros(r, p);
    let mut weights = DMatrix::zeros(r, p);
    for (i, lat) in latents.iter().enumerate() {
        for t in 0..lat.num_bins() {
            if mask.is_held_out(i, t) {
                continue;
            }
            let m = &lat.means[t + 1];
            let v = &lat.covs[t + 1];
            for j in 0..p {
                let c = loading.row(j);
                let cv = c * v;
                weights[(i, j)] += (c.dot(&m.transpose()) + 0.5 * cv.dot(&c) + offset[j]).exp();
                counts[(i, j)] += dataset.count(i, t, j) as f64;
            }
        }
    }
    (counts, weights)
}

/// Laplace posterior over the stacked modulators:
/// `log N(h | 0, K ⊗ I_k) + Σ_ij [Y_ij c_jᵀh_i − w_ij exp(c_jᵀh_i)]`.
#[allow(clippy::too_many_arguments)]
pub fn vbm_update_modulators(
    latents: &[TrialLatents],
    dataset: &SpikeDataset,
    mask: &HoldoutMask,
    loading: &DMatrix<f64>,
    offset: &DVector<f64>,
    kernel: &BlockKernel,
    init: &DVector<f64>,
    newton: &NewtonSettings,
) -> Result<ModulatorPosterior> {
    let r = latents.len();
    let k = loading.ncols();
    ensure_shape!(kernel.num_trials() == r && kernel.block_dim == k, "kernel does not match {r} trials of dimension {k}");
    if kernel.is_degenerate() {
        return Ok(ModulatorPosterior::zero(r, k));
    }
    let (counts, weights) = modulator_sufficient_stats(latents, dataset, mask, loading, offset);
    modulator_posterior(&counts, &weights, loading, kernel, init, newton)
}

/// `−½ hᵀ P h + Σ_ij [Y_ij c_jᵀh_i − w_ij exp(c_jᵀh_i)]` over stacked `h`
/// (trial-major), with `P` the prior precision.
///
/// The Hessian is `−P − blockdiag(H_h^(i))`.
pub fn modulator_objective<'a>(
    counts: &'a DMatrix<f64>,
    weights: &'a DMatrix<f64>,
    loading: &'a DMatrix<f64>,
    prior_precision: &'a DMatrix<f64>,
) -> impl Fn(&DVector<f64>, bool) -> Evaluation + 'a {
    move |h: &DVector<f64>, full: bool| {
        let kh = prior_precision * h;
        let (lik, grad, blocks) = modulator_likelihood(counts, weights, loading, h, full);
        let value = -0.5 * h.dot(&kh) + lik;
        if !full {
            return Evaluation {
                value,
                gradient: DVector::zeros(0),
                hessian: DMatrix::zeros(0, 0),
            };
        }
        let k = loading.ncols();
        let mut hessian = -prior_precision;
        for (i, b) in blocks.iter().enumerate() {
            let mut v = hessian.view_mut((i * k, i * k), (k, k));
            v -= b;
        }
        Evaluation {
            value,
            gradient: grad - kh,
            hessian,
        }
    }
}

/// Likelihood part of the modulator objective: value, gradient, and the
/// per-trial blocks `Σ_j w_ij exp(c_jᵀh_i) c_j c_jᵀ`.
fn modulator_likelihood(
    counts: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    loading: &DMatrix<f64>,
    h: &DVector<f64>,
    full: bool,
) -> (f64, DVector<f64>, Vec<DMatrix<f64>>) {
    let r = counts.nrows();
    let p = loading.nrows();
    let k = loading.ncols();
    let mut value = 0.0;
    let mut grad = DVector::zeros(r * k);
    let mut blocks = Vec::with_capacity(if full { r } else { 0 });
    for i in 0..r {
        let hi = h.rows(i * k, k);
        let mut block = DMatrix::zeros(k, k);
        for j in 0..p {
            let c = loading.row(j).transpose();
            let eta = c.dot(&hi);
            let e = weights[(i, j)] * eta.exp();
            value += counts[(i, j)] * eta - e;
            if full {
                grad.rows_mut(i * k, k).axpy(counts[(i, j)] - e, &c, 1.0);
                block += &c * c.transpose() * e;
            }
        }
        if full {
            blocks.push(block);
        }
    }
    (value, grad, blocks)
}

pub(crate) fn modulator_posterior(
    counts: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    loading: &DMatrix<f64>,
    kernel: &BlockKernel,
    init: &DVector<f64>,
    newton: &NewtonSettings,
) -> Result<ModulatorPosterior> {
    let k = loading.ncols();
    let prior_precision = kron_identity(&kernel.scalar_inverse()?, k);
    let objective = modulator_objective(counts, weights, loading, &prior_precision);
    let mode = newton_maximize(objective, init.clone(), newton)?;
    let (_, _, lik_precision) = modulator_likelihood(counts, weights, loading, &mode.point, true);
    let cov = spd_inverse(&mode.precision)?;
    Ok(ModulatorPosterior {
        latent_dim: k,
        belief: GaussianBelief { mean: mode.point, cov },
        lik_precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::build_kernel;
    use crate::model::Hyperparams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Latents with zero covariance following `means`.
    fn deterministic_latents(path: &[DVector<f64>]) -> TrialLatents {
        let k = path[0].len();
        TrialLatents {
            means: path.to_vec(),
            covs: vec![DMatrix::zeros(k, k); path.len()],
            cross_covs: vec![DMatrix::zeros(k, k); path.len() - 1],
        }
    }

    fn random_latents(rng: &mut ChaCha8Rng, k: usize, t_len: usize) -> TrialLatents {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let means: Vec<DVector<f64>> = (0..=t_len).map(|_| DVector::from_fn(k, |_, _| normal())).collect();
        let mut covs = Vec::new();
        for _ in 0..=t_len {
            let f = DMatrix::from_fn(k, k, |_, _| 0.3 * normal());
            covs.push(&f * f.transpose() + DMatrix::identity(k, k) * 0.1);
        }
        let cross_covs = (0..t_len).map(|_| DMatrix::from_fn(k, k, |_, _| 0.05 * normal())).collect();
        TrialLatents { means, covs, cross_covs }
    }

    #[test]
    fn dominating_ridge_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = random_latents(&mut rng, 2, 20);
        let u = DMatrix::from_fn(20, 1, |t, _| (t as f64).sin());
        let stats = vec![TransitionStats::from_latents(&lat, &u).unwrap()];
        let post = vbm_update_dynamics(&stats, 1e12, 1e12).unwrap();
        assert!(post.mean.amax() < 1e-9);
        assert!(post.row_cov.amax() < 1e-11);
    }

    #[test]
    fn noiseless_ar_recovers_coefficient() {
        let t_len = 400;
        let mut path = vec![DVector::from_element(1, 5.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..t_len {
            let z: f64 = StandardNormal.sample(&mut rng);
            let next = path.last().unwrap() * 0.7 + DVector::from_element(1, z);
            path.push(next);
        }
        let lat = deterministic_latents(&path);
        let stats = vec![TransitionStats::from_latents(&lat, &DMatrix::zeros(t_len, 0)).unwrap()];
        let post = vbm_update_dynamics(&stats, 1e-6, 1e-6).unwrap();
        assert!((post.mean[(0, 0)] - 0.7).abs() < 0.02, "{}", post.mean[(0, 0)]);
    }

    #[test]
    fn dynamics_posterior_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, d, t_len) = (2, 1, 8);
        let (phi_a, phi_b) = (0.7, 2.0);
        let trials: Vec<(TrialLatents, DMatrix<f64>)> = (0..2)
            .map(|_| {
                let lat = random_latents(&mut rng, k, t_len);
                let u = DMatrix::from_fn(t_len, d, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                });
                (lat, u)
            })
            .collect();
        let stats: Vec<_> = trials.iter().map(|(l, u)| TransitionStats::from_latents(l, u).unwrap()).collect();
        let post = vbm_update_dynamics(&stats, phi_a, phi_b).unwrap();

        // Dense oracle over θ = vec([A B]) (row-major), expected log joint
        // Σ −½ E|x_t − W z_t|², z_t = [x_{t−1}; u_t].
        let n = k * (k + d);
        let mut prec = DMatrix::<f64>::zeros(n, n);
        let mut lin = DVector::<f64>::zeros(n);
        for (lat, u) in &trials {
            for t in 1..=t_len {
                let mut ezz = DMatrix::zeros(k + d, k + d);
                ezz.view_mut((0, 0), (k, k)).copy_from(&lat.second_moment(t - 1));
                let mu = &lat.means[t - 1] * u.row(t - 1);
                ezz.view_mut((0, k), (k, d)).copy_from(&mu);
                ezz.view_mut((k, 0), (d, k)).copy_from(&mu.transpose());
                ezz.view_mut((k, k), (d, d)).copy_from(&(u.row(t - 1).transpose() * u.row(t - 1)));
                let mut exz = DMatrix::zeros(k, k + d);
                exz.view_mut((0, 0), (k, k)).copy_from(&lat.lag_moment(t - 1));
                exz.view_mut((0, k), (k, d)).copy_from(&(&lat.means[t] * u.row(t - 1)));
                for row in 0..k {
                    for a in 0..k + d {
                        lin[row * (k + d) + a] += exz[(row, a)];
                        for b in 0..k + d {
                            prec[(row * (k + d) + a, row * (k + d) + b)] += ezz[(a, b)];
                        }
                    }
                }
            }
        }
        for row in 0..k {
            for a in 0..k + d {
                prec[(row * (k + d) + a, row * (k + d) + a)] += if a < k { phi_a } else { phi_b };
            }
        }
        let cov = prec.clone().try_inverse().unwrap();
        let mean = &cov * lin;
        for row in 0..k {
            for a in 0..k + d {
                assert!((post.mean[(row, a)] - mean[row * (k + d) + a]).abs() < 1e-10);
                for b in 0..k + d {
                    assert!((post.row_cov[(a, b)] - cov[(row * (k + d) + a, row * (k + d) + b)]).abs() < 1e-10);
                }
            }
        }
    }

    fn per_trial_fixture(r: usize, k: usize, seed: u64) -> Vec<TransitionStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..r)
            .map(|_| {
                let lat = random_latents(&mut rng, k, 15);
                TransitionStats::from_latents(&lat, &DMatrix::zeros(15, 0)).unwrap()
            })
            .collect()
    }

    #[test]
    fn vague_prior_decouples_trials() {
        let (r, k) = (3, 2);
        let stats = per_trial_fixture(r, k, 4);
        let mut hyper = Hyperparams::stationary();
        hyper.eps = 1e9;
        let kernel = build_kernel(&hyper, &[0, 1, 2], 1).unwrap();
        let post = vbm_update_per_trial_dynamics(&stats, &kernel, &DVector::zeros(k * k), &DMatrix::zeros(k, 0), &DMatrix::zeros(0, 0)).unwrap();
        for (i, s) in stats.iter().enumerate() {
            let ls = &s.next_prev * s.prev_prev.clone().try_inverse().unwrap();
            assert!((post.trial_dynamics(i) - ls).amax() < 1e-6);
        }
    }

    #[test]
    fn short_length_scale_shrinks_toward_mean() {
        let (r, k) = (3, 2);
        let stats = per_trial_fixture(r, k, 5);
        let hyper = Hyperparams::new(0.3, 1e-4, 0.2).unwrap();
        let kernel = build_kernel(&hyper, &[0, 1, 2], 1).unwrap();
        let kappa = 0.5;
        let a_bar = DVector::from_vec(vec![0.5, 0.1, -0.1, 0.4]);
        let post = vbm_update_per_trial_dynamics(&stats, &kernel, &a_bar, &DMatrix::zeros(k, 0), &DMatrix::zeros(0, 0)).unwrap();
        let a_bar_m = DMatrix::from_row_slice(k, k, a_bar.as_slice());
        for (i, s) in stats.iter().enumerate() {
            // Row l: (I/κ + S)⁻¹ (ā_l/κ + g_l).
            let lhs = DMatrix::identity(k, k) / kappa + &s.prev_prev;
            let inv = lhs.try_inverse().unwrap();
            let expected = (&a_bar_m / kappa + &s.next_prev) * inv;
            assert!((post.trial_dynamics(i) - expected).amax() < 1e-9);
        }
    }

    #[test]
    fn single_scalar_trial_is_conjugate() {
        let stats = per_trial_fixture(1, 1, 6);
        let hyper = Hyperparams::new(0.5, 1.0, 0.1).unwrap();
        let kernel = build_kernel(&hyper, &[0], 1).unwrap();
        let a_bar = DVector::from_element(1, 0.3);
        let post = vbm_update_per_trial_dynamics(&stats, &kernel, &a_bar, &DMatrix::zeros(1, 0), &DMatrix::zeros(0, 0)).unwrap();
        let prior_var = 0.6;
        let s = stats[0].prev_prev[(0, 0)];
        let g = stats[0].next_prev[(0, 0)];
        let var = 1.0 / (1.0 / prior_var + s);
        assert!((post.row_cov[(0, 0)] - var).abs() < 1e-12);
        assert!((post.means[(0, 0)] - var * (0.3 / prior_var + g)).abs() < 1e-12);
    }

    fn constant_rate_dataset(rate: f64, r: usize, t_len: usize, p: usize, seed: u64) -> SpikeDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Poisson::new(rate).unwrap();
        let counts: Vec<u32> = (0..r * t_len * p).map(|_| dist.sample(&mut rng) as u32).collect();
        SpikeDataset::new(counts, vec![], r, t_len, p, 0, 0.05).unwrap()
    }

    #[test]
    fn offset_only_update_is_log_mean() {
        let (r, t_len, p, k) = (2, 50, 3, 2);
        let ds = constant_rate_dataset(2.5, r, t_len, p, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lats: Vec<_> = (0..r).map(|_| random_latents(&mut rng, k, t_len)).collect();
        let mask = HoldoutMask::none(r, t_len);
        let (c, d) = mle_update_loading(&lats, None, &ds, &mask, &DMatrix::zeros(p, k), &DVector::zeros(p), 1.0, 1e-12, false, &NewtonSettings::MSTEP).unwrap();
        assert_eq!(c, DMatrix::zeros(p, k));
        for j in 0..p {
            let mean = (0..r).flat_map(|i| (0..t_len).map(move |t| (i, t))).map(|(i, t)| ds.count(i, t, j) as f64).sum::<f64>() / (r * t_len) as f64;
            assert!((d[j] - mean.ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn silent_neuron_gets_finite_offset() {
        let (r, t_len, k) = (1, 30, 1);
        let ds = SpikeDataset::new(vec![0; t_len], vec![], r, t_len, 1, 0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lats = vec![random_latents(&mut rng, k, t_len)];
        let (c, d) = mle_update_loading(&lats, None, &ds, &HoldoutMask::none(r, t_len), &DMatrix::zeros(1, k), &DVector::zeros(1), 1.0, 1.0, true, &NewtonSettings::MSTEP).unwrap();
        assert!(d[0].is_finite() && c[(0, 0)].is_finite());
    }

    #[test]
    fn loading_update_gradient_vanishes() {
        let (r, t_len, p, k) = (2, 40, 2, 2);
        let ds = constant_rate_dataset(1.5, r, t_len, p, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lats: Vec<_> = (0..r).map(|_| random_latents(&mut rng, k, t_len)).collect();
        let mask = HoldoutMask::none(r, t_len);
        let (phi_c, phi_d) = (1.0, 1.0);
        let (c, d) = mle_update_loading(&lats, None, &ds, &mask, &DMatrix::zeros(p, k), &DVector::zeros(p), phi_c, phi_d, true, &NewtonSettings::MSTEP).unwrap();
        for j in 0..p {
            let cj = c.row(j).transpose();
            let mut gc = -&cj * phi_c;
            let mut gd = -phi_d * d[j];
            for (i, lat) in lats.iter().enumerate() {
                for t in 0..t_len {
                    let (m, v) = (&lat.means[t + 1], &lat.covs[t + 1]);
                    let y = ds.count(i, t, j) as f64;
                    let lam = (cj.dot(m) + 0.5 * cj.dot(&(v * &cj)) + d[j]).exp();
                    gc += m * y - (m + v * &cj) * lam;
                    gd += y - lam;
                }
            }
            assert!(gc.norm() < 1e-6 && gd.abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_kernel_forces_zero_modulators() {
        let (r, t_len, p, k) = (2, 10, 2, 1);
        let ds = constant_rate_dataset(1.0, r, t_len, p, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lats: Vec<_> = (0..r).map(|_| random_latents(&mut rng, k, t_len)).collect();
        let kernel = build_kernel(&Hyperparams::stationary(), &[0, 1], k).unwrap();
        let post = vbm_update_modulators(&lats, &ds, &HoldoutMask::none(r, t_len), &DMatrix::from_element(p, k, 0.5), &DVector::zeros(p), &kernel, &DVector::zeros(r * k), &NewtonSettings::MSTEP).unwrap();
        assert_eq!(post.belief.mean, DVector::zeros(r * k));
        assert_eq!(post.belief.cov, DMatrix::zeros(r * k, r * k));
    }
}
