//! Variational Bayesian EM for Model I and Model II.

pub mod expectations;
pub mod hyper;
pub mod init;
pub mod laplace;
pub mod messages;
pub mod mstep;
pub mod score;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{build_kernel, KroneckerMoments};
use crate::linalg::logdet_spd;
use crate::model::{Hyperparams, RidgeBlock, SpikeDataset};

pub use expectations::{
    DynamicsMoments, DynamicsPosterior, LatentParams, ModulatorPosterior, ParamPosterior, PerTrialDynamicsPosterior,
    TrialExpectations,
};
pub use hyper::{update_hyperparams, HyperOptSettings};
pub use init::InitialParams;
pub use laplace::{laplace_gaussianize, NewtonSettings};
pub use messages::{backward_pass, forward_pass, infer_trial, smoothed_statistics, Emission, TrialInput, TrialLatents};
pub use mstep::{
    mle_update_loading, vbm_update_dynamics, vbm_update_modulators, vbm_update_per_trial_dynamics, TransitionStats,
};
pub use score::{one_step_ahead_score, HoldoutMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-trial modulators with a GP prior over trials.
    ModelI,
    /// Per-trial dynamics matrices with a GP prior over trials.
    ModelII,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub max_iters: usize,
    pub estep_newton: NewtonSettings,
    pub mstep_newton: NewtonSettings,
    pub hyper_opt: HyperOptSettings,
    pub seed: u64,
    /// Stop once the score gained less than `convergence_tol` over this many iterations.
    pub convergence_window: usize,
    /// Nats per held-out bin.
    pub convergence_tol: f64,
    /// Fraction of bins per trial held out for the one-step-ahead score.
    pub holdout_fraction: f64,
    /// Defaults to `σ² = 0.1`, `τ² = (r/10)²`, ridge 1.
    pub initial_hyper: Option<Hyperparams>,
    /// Defaults to the moment-based warm start.
    pub initial_params: Option<InitialParams>,
    /// Keep `C` and `d` at their initial values.
    pub fix_loading: bool,
    /// Site relinearization sweeps per E-step.
    pub relinearize: usize,
}

impl FitConfig {
    pub fn new(variant: Variant, latent_dim: usize) -> Self {
        Self {
            variant,
            latent_dim,
            max_iters: 200,
            estep_newton: NewtonSettings::ESTEP,
            mstep_newton: NewtonSettings::MSTEP,
            hyper_opt: HyperOptSettings::default(),
            seed: 0,
            convergence_window: 3,
            convergence_tol: 1e-4,
            holdout_fraction: 0.1,
            initial_hyper: None,
            initial_params: None,
            fix_loading: false,
            relinearize: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Domain("latent dimension must be >= 1".into()));
        }
        for (name, tol) in [
            ("estep newton tolerance", self.estep_newton.tol),
            ("mstep newton tolerance", self.mstep_newton.tol),
            ("convergence tolerance", self.convergence_tol),
        ] {
            if !(tol > 0.0) {
                return Err(Error::Domain(format!("{name} must be > 0")));
            }
        }
        if self.convergence_window == 0 {
            return Err(Error::Domain("convergence window must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return Err(Error::Domain("holdout fraction must lie in [0, 0.5)".into()));
        }
        if let Some(h) = &self.initial_hyper {
            h.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// One-step-ahead log-likelihood, nats per held-out bin.
    pub score: Option<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    pub ridge: BTreeMap<RidgeBlock, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub initial_score: Option<f64>,
    pub iterations: Vec<IterationRecord>,
    /// Iteration whose parameters are returned (0 is the warm start).
    pub best_iteration: usize,
    pub converged: bool,
    pub heldout_bins: usize,
    /// Wall-clock seconds per phase; not serialized so outputs stay reproducible.
    #[serde(skip)]
    pub phase_seconds: BTreeMap<&'static str, f64>,
}

impl FitDiagnostics {
    /// Score of the returned parameters.
    pub fn final_score(&self) -> Option<f64> {
        match self.best_iteration {
            0 => self.initial_score,
            i => self.iterations[i - 1].score,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamPosterior,
    pub latents: Vec<TrialLatents>,
    pub hyper: Hyperparams,
    pub diagnostics: FitDiagnostics,
    pub mask: HoldoutMask,
    pub trial_ids: Vec<u32>,
}

pub fn default_hyper(num_trials: usize) -> Hyperparams {
    let tau = (num_trials as f64 / 10.0).max(1.0);
    Hyperparams::new(0.1, tau * tau, Hyperparams::DEFAULT_EPS).expect("valid defaults")
}

struct Timer<'a> {
    start: Instant,
    phase: &'static str,
    sink: &'a mut BTreeMap<&'static str, f64>,
}

impl<'a> Timer<'a> {
    fn new(phase: &'static str, sink: &'a mut BTreeMap<&'static str, f64>) -> Self {
        Self {
            start: Instant::now(),
            phase,
            sink,
        }
    }
}

impl Drop for Timer<'_> {
    fn drop(&mut self) {
        *self.sink.entry(self.phase).or_insert(0.0) += self.start.elapsed().as_secs_f64();
    }
}

/// E-step over all trials in parallel, reduced in trial order.
pub fn vbe(
    params: &ParamPosterior,
    dataset: &SpikeDataset,
    mask: &HoldoutMask,
    newton: &NewtonSettings,
    relinearize: usize,
) -> Result<(Vec<TrialLatents>, f64, usize)> {
    let results = (0..dataset.num_trials())
        .into_par_iter()
        .map(|i| {
            let exp = params.expected_param_stats(i)?;
            let u = dataset.trial_stimulus(i);
            let input = TrialInput {
                emission: Emission::Poisson {
                    loading: &params.loading,
                    offset: exp.effective_offset,
                    counts: dataset.trial_counts(i),
                },
                stimulus: &u,
                held_out: Some(mask.trial(i)),
            };
            let (fwd, lat) = infer_trial(&input, &exp.dynamics, newton, relinearize)
                .map_err(|e| Error::Numeric(format!("trial {i}: {e}")))?;
            let (s, n) = one_step_ahead_score(&input, &fwd);
            Ok((lat, s, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut latents = Vec::with_capacity(results.len());
    let mut total = 0.0;
    let mut bins = 0;
    for (lat, s, n) in results {
        latents.push(lat);
        total += s;
        bins += n;
    }
    Ok((latents, total, bins))
}

fn per_bin(total: f64, bins: usize) -> Option<f64> {
    (bins > 0).then(|| total / bins as f64)
}

fn initial_posterior(variant: Variant, init: &InitialParams, hyper: &Hyperparams, num_trials: usize) -> ParamPosterior {
    let k = init.dynamics.nrows();
    let latent = match variant {
        Variant::ModelI => {
            let mut modulators = ModulatorPosterior::zero(num_trials, k);
            if hyper.sigma2 > 0.0 && init.modulators.shape() == (num_trials, k) {
                modulators.belief.mean = DVector::from_iterator(num_trials * k, init.modulators.transpose().iter().copied());
            }
            LatentParams::ModelI {
                dynamics: DynamicsPosterior::point_mass(&init.dynamics, &init.input_map),
                modulators,
            }
        }
        Variant::ModelII => LatentParams::ModelII {
            dynamics: PerTrialDynamicsPosterior::point_mass(num_trials, &init.dynamics, &init.input_map),
        },
    };
    ParamPosterior {
        loading: init.loading.clone(),
        offset: init.offset.clone(),
        latent,
    }
}

/// Runs VBEM until the one-step-ahead score stalls or `max_iters` is reached.
pub fn fit(dataset: &SpikeDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let r = dataset.num_trials();
    let k = config.latent_dim;
    if r == 0 || dataset.num_bins() == 0 {
        return Err(Error::Domain("dataset has no trials or no bins".into()));
    }
    let trial_ids = dataset.trial_ids().to_vec();
    let mask = HoldoutMask::random(config.seed, &trial_ids, dataset.num_bins(), config.holdout_fraction);
    let mut phase_seconds = BTreeMap::new();

    let init = match &config.initial_params {
        Some(p) => {
            if p.loading.shape() != (dataset.num_neurons(), k) || p.dynamics.shape() != (k, k) || p.input_map.shape() != (k, dataset.input_dim()) {
                return Err(Error::Shape("initial parameters do not match the dataset and latent dimension".into()));
            }
            p.clone()
        }
        None => init::initialize(dataset, k, &mask).map_err(|e| e.in_phase("init", 0))?,
    };
    let mut hyper = config.initial_hyper.clone().unwrap_or_else(|| default_hyper(r));
    let mut params = initial_posterior(config.variant, &init, &hyper, r);

    let (mut latents, total, bins) = {
        let _t = Timer::new("vbe", &mut phase_seconds);
        vbe(&params, dataset, &mask, &config.estep_newton, config.relinearize).map_err(|e| e.in_phase("vbe", 0))?
    };
    let initial_score = per_bin(total, bins);
    let mut scores = vec![initial_score];
    let mut records = Vec::new();
    let mut converged = false;
    // Held aside once a later iterate scores worse; `None` while the current state is the best.
    let mut best_iteration = 0;
    let mut best: Option<(ParamPosterior, Vec<TrialLatents>, Hyperparams)> = None;

    for iteration in 1..=config.max_iters {
        let next_params = vbm(&params, &latents, dataset, &mask, &hyper, config, iteration, &mut phase_seconds)?;
        let next_hyper = update_hyper(&next_params, &hyper, &trial_ids, config, &mut phase_seconds).map_err(|e| e.in_phase("hyperparams", iteration))?;
        let (next_latents, total, bins) = {
            let _t = Timer::new("vbe", &mut phase_seconds);
            vbe(&next_params, dataset, &mask, &config.estep_newton, config.relinearize).map_err(|e| e.in_phase("vbe", iteration))?
        };
        let score = per_bin(total, bins);
        log::debug!("iteration {iteration}: score {score:?}, sigma2 {:.4e}, tau2 {:.4e}", next_hyper.sigma2, next_hyper.tau2);
        if improves(score, scores[best_iteration]) {
            best_iteration = iteration;
            best = None;
        } else if best.is_none() {
            best = Some((params, latents, hyper));
        }
        params = next_params;
        hyper = next_hyper;
        latents = next_latents;
        scores.push(score);
        records.push(IterationRecord {
            iteration,
            score,
            sigma2: hyper.sigma2,
            tau2: hyper.tau2,
            ridge: hyper.ridge.clone(),
        });
        if iteration >= config.convergence_window {
            if let (Some(now), Some(before)) = (score, scores[iteration - config.convergence_window]) {
                if now - before < config.convergence_tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    if let Some((p, l, h)) = best {
        params = p;
        latents = l;
        hyper = h;
    }

    Ok(FitResult {
        params,
        latents,
        hyper,
        diagnostics: FitDiagnostics {
            initial_score,
            iterations: records,
            best_iteration,
            converged,
            heldout_bins: mask.num_held_out(),
            phase_seconds,
        },
        mask,
        trial_ids,
    })
}

/// Missing scores (no held-out bins) never block progress.
fn improves(score: Option<f64>, best: Option<f64>) -> bool {
    match (score, best) {
        (Some(s), Some(b)) => s > b,
        _ => true,
    }
}

/// One round of parameter updates: `(C, d)`, then dynamics, then the trial-varying block.
#[allow(clippy::too_many_arguments)]
fn vbm(
    params: &ParamPosterior,
    latents: &[TrialLatents],
    dataset: &SpikeDataset,
    mask: &HoldoutMask,
    hyper: &Hyperparams,
    config: &FitConfig,
    iteration: usize,
    phase_seconds: &mut BTreeMap<&'static str, f64>,
) -> Result<ParamPosterior> {
    let k = config.latent_dim;
    let modulators = match &params.latent {
        LatentParams::ModelI { modulators, .. } => Some(modulators),
        LatentParams::ModelII { .. } => None,
    };
    let (loading, offset) = if config.fix_loading {
        (params.loading.clone(), params.offset.clone())
    } else {
        let _t = Timer::new("loading", phase_seconds);
        mle_update_loading(
            latents,
            modulators,
            dataset,
            mask,
            &params.loading,
            &params.offset,
            hyper.ridge(RidgeBlock::Loading),
            hyper.ridge(RidgeBlock::Offset),
            true,
            &config.mstep_newton,
        )
        .map_err(|e| e.in_phase("loading", iteration))?
    };

    let stats = {
        let _t = Timer::new("dynamics", phase_seconds);
        (0..dataset.num_trials())
            .into_par_iter()
            .map(|i| TransitionStats::from_latents(&latents[i], &dataset.trial_stimulus(i)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_phase("dynamics", iteration))?
    };
    let phi_a = hyper.ridge(RidgeBlock::Dynamics);
    let phi_b = hyper.ridge(RidgeBlock::InputMap);

    let latent = match &params.latent {
        LatentParams::ModelI { modulators, .. } => {
            let dynamics = {
                let _t = Timer::new("dynamics", phase_seconds);
                vbm_update_dynamics(&stats, phi_a, phi_b).map_err(|e| e.in_phase("dynamics", iteration))?
            };
            let _t = Timer::new("modulators", phase_seconds);
            let kernel = build_kernel(hyper, dataset.trial_ids(), k).map_err(|e| e.in_phase("modulators", iteration))?;
            let modulators = vbm_update_modulators(
                latents,
                dataset,
                mask,
                &loading,
                &offset,
                &kernel,
                &modulators.belief.mean,
                &config.mstep_newton,
            )
            .map_err(|e| e.in_phase("modulators", iteration))?;
            LatentParams::ModelI { dynamics, modulators }
        }
        LatentParams::ModelII { dynamics: prev } => {
            let _t = Timer::new("per_trial_dynamics", phase_seconds);
            let kernel = build_kernel(hyper, dataset.trial_ids(), 1).map_err(|e| e.in_phase("per_trial_dynamics", iteration))?;
            let dynamics = if kernel.is_degenerate() {
                shared_as_per_trial(&stats, phi_a, phi_b)
            } else {
                per_trial_round(&stats, &kernel, prev, phi_a, phi_b)
            }
            .map_err(|e| e.in_phase("per_trial_dynamics", iteration))?;
            LatentParams::ModelII { dynamics }
        }
    };
    Ok(ParamPosterior { loading, offset, latent })
}

fn per_trial_round(
    stats: &[TransitionStats],
    kernel: &crate::gp::BlockKernel,
    prev: &PerTrialDynamicsPosterior,
    phi_a: f64,
    phi_b: f64,
) -> Result<PerTrialDynamicsPosterior> {
    let mut post = vbm_update_per_trial_dynamics(stats, kernel, &prev.mean_dynamics, &prev.input_mean, &prev.input_row_cov)?;
    post.mean_dynamics = mstep::update_mean_dynamics(&post.means, phi_a);
    let trial_a: Vec<DMatrix<f64>> = (0..post.num_trials()).map(|i| post.trial_dynamics(i)).collect();
    let (b, b_cov) = mstep::vbm_update_input_map(stats, &trial_a, phi_b)?;
    post.input_mean = b;
    post.input_row_cov = b_cov;
    Ok(post)
}

/// Without a trial-varying prior every trial shares one `[A B]` posterior.
fn shared_as_per_trial(stats: &[TransitionStats], phi_a: f64, phi_b: f64) -> Result<PerTrialDynamicsPosterior> {
    let shared = vbm_update_dynamics(stats, phi_a, phi_b)?;
    let r = stats.len();
    let k = shared.latent_dim();
    let d = shared.input_dim();
    let a_cov = shared.row_cov.view((0, 0), (k, k)).into_owned();
    let mut post = PerTrialDynamicsPosterior::point_mass(r, &shared.dynamics(), &shared.input_map());
    post.row_cov = crate::linalg::kron_identity(&DMatrix::from_element(r, r, 1.0), k).component_mul(&DMatrix::from_fn(r * k, r * k, |a, b| a_cov[(a % k, b % k)]));
    post.lik_precision = stats.iter().map(|s| s.prev_prev.clone()).collect();
    post.input_row_cov = shared.row_cov.view((k, k), (d, d)).into_owned();
    Ok(post)
}

fn update_hyper(
    params: &ParamPosterior,
    hyper: &Hyperparams,
    trial_ids: &[u32],
    config: &FitConfig,
    phase_seconds: &mut BTreeMap<&'static str, f64>,
) -> Result<Hyperparams> {
    let _t = Timer::new("hyperparams", phase_seconds);
    let mut next = hyper.clone();
    let settings = &config.hyper_opt;
    match &params.latent {
        LatentParams::ModelI { dynamics, modulators } => {
            if settings.learn_kernel && !hyper.is_degenerate() {
                let n = modulators.belief.dim();
                let moments = KroneckerMoments::from_dense(&modulators.belief, &DVector::zeros(n), modulators.latent_dim)?;
                next = update_hyperparams(&moments, trial_ids, hyper, settings);
            }
            if settings.learn_ridge {
                let k = dynamics.latent_dim();
                let d = dynamics.input_dim();
                let kf = k as f64;
                let a = dynamics.dynamics();
                let a_trace = kf * dynamics.row_cov.view((0, 0), (k, k)).trace();
                next.ridge.insert(RidgeBlock::Dynamics, hyper::ridge_update(a.norm_squared(), a_trace, k * k));
                if d > 0 {
                    let b = dynamics.input_map();
                    let b_trace = kf * dynamics.row_cov.view((k, k), (d, d)).trace();
                    next.ridge.insert(RidgeBlock::InputMap, hyper::ridge_update(b.norm_squared(), b_trace, k * d));
                }
            }
        }
        LatentParams::ModelII { dynamics } => {
            if settings.learn_kernel && !hyper.is_degenerate() {
                let moments = per_trial_moments(dynamics)?;
                next = update_hyperparams(&moments, trial_ids, hyper, settings);
            }
            let d = dynamics.input_mean.ncols();
            if settings.learn_ridge && d > 0 {
                let k = dynamics.latent_dim;
                let trace = k as f64 * dynamics.input_row_cov.trace();
                next.ridge.insert(RidgeBlock::InputMap, hyper::ridge_update(dynamics.input_mean.norm_squared(), trace, k * d));
            }
        }
    }
    Ok(next)
}

/// Kronecker summary of the per-trial dynamics posterior against the prior mean `1 ⊗ ā`.
pub fn per_trial_moments(post: &PerTrialDynamicsPosterior) -> Result<KroneckerMoments> {
    let k = post.latent_dim;
    let r = post.num_trials();
    let mut second = DMatrix::zeros(r, r);
    for c in 0..k {
        for i in 0..r {
            for j in 0..r {
                second[(i, j)] += k as f64 * post.row_cov[(i * k + c, j * k + c)];
            }
        }
    }
    for q in 0..k * k {
        let diff = DVector::from_fn(r, |i, _| post.means[(i, q)] - post.mean_dynamics[q]);
        second += &diff * diff.transpose();
    }
    Ok(KroneckerMoments {
        second_moment: second,
        logdet_post: k as f64 * logdet_spd(&post.row_cov)?,
        block_dim: k * k,
    })
}
