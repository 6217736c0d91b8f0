//! Generative sampling from Model I, Model II and the stationary PLDS, plus the
//! two synthetic experiment constructions (rate modulation and correlation sweep).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::gp::scalar_cross_kernel;
use crate::linalg::{cholesky_jittered, spectral_radius, vec_row_major};
use crate::model::{Hyperparams, ModelIIParams, ModelIParams, SharedParams, SpikeDataset};

/// Largest log rate accepted while sampling.
pub const MAX_LOG_RATE: f64 = 30.0;

/// SplitMix64 finalizer; mixes a master seed with a stream tag and an index.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed streams, so that independent consumers never share random numbers.
pub mod streams {
    pub const TRIALS: u64 = 1;
    pub const MODULATORS: u64 = 2;
    pub const HOLDOUT: u64 = 3;
    pub const PREDICTION: u64 = 4;
    pub const MODEL_SAMPLES: u64 = 5;
}

/// Drifting-grating stimulus: `(sin φ, cos φ, 1)` while on, zero otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GratingStimulus {
    pub frequency_hz: f64,
    pub bin_width_s: f64,
    /// First bin (inclusive) during which the stimulus is on.
    pub on_start: usize,
    /// First bin after the stimulus switches off.
    pub on_end: usize,
}

pub fn make_grating_stimulus(spec: &GratingStimulus, num_bins: usize) -> Result<DMatrix<f64>> {
    if !(spec.on_start < spec.on_end && spec.on_end <= num_bins) {
        return Err(Error::Domain(format!(
            "on-window [{}, {}) invalid for {num_bins} bins",
            spec.on_start, spec.on_end
        )));
    }
    let mut u = DMatrix::zeros(num_bins, 3);
    for t in spec.on_start..spec.on_end {
        let phase = 2.0 * PI * spec.frequency_hz * (t - spec.on_start) as f64 * spec.bin_width_s;
        u[(t, 0)] = phase.sin();
        u[(t, 1)] = phase.cos();
        u[(t, 2)] = 1.0;
    }
    Ok(u)
}

/// One joint draw `h ~ N(0, K ⊗ I_k)` over trials `0..r`, returned as `r x k`.
pub fn sample_modulators(hyper: &Hyperparams, num_trials: usize, latent_dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    let ids: Vec<u32> = (0..num_trials as u32).collect();
    sample_modulators_at(hyper, &ids, latent_dim, seed)
}

pub fn sample_modulators_at(hyper: &Hyperparams, trial_ids: &[u32], latent_dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    hyper.validate()?;
    let r = trial_ids.len();
    if hyper.is_degenerate() {
        return Ok(DMatrix::zeros(r, latent_dim));
    }
    let k_scalar = scalar_cross_kernel(hyper, trial_ids, trial_ids);
    let chol = cholesky_jittered(&k_scalar)?;
    let mut rng = rng_from(seed);
    let white = DMatrix::from_fn(r, latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * white)
}

/// Latent path and counts of one simulated trial.
#[derive(Debug, Clone)]
pub struct TrialSample {
    /// `(T + 1) x k`, row 0 is the initial state.
    pub latents: DMatrix<f64>,
    /// `T x p` row-major.
    pub counts: Vec<u32>,
    /// `T x p` true log rates.
    pub log_rates: DMatrix<f64>,
}

/// Anything that can hand out the stationary parameters and modulator of a trial.
pub trait TrialModel: Sync {
    fn num_trials(&self) -> usize;
    fn trial_params(&self, trial: usize) -> (SharedParams, DVector<f64>);
}

impl TrialModel for ModelIParams {
    fn num_trials(&self) -> usize {
        ModelIParams::num_trials(self)
    }
    fn trial_params(&self, trial: usize) -> (SharedParams, DVector<f64>) {
        (self.shared.clone(), self.modulator(trial))
    }
}

impl TrialModel for ModelIIParams {
    fn num_trials(&self) -> usize {
        ModelIIParams::num_trials(self)
    }
    fn trial_params(&self, trial: usize) -> (SharedParams, DVector<f64>) {
        let params = ModelIIParams::trial_params(self, trial);
        let k = params.latent_dim();
        (params, DVector::zeros(k))
    }
}

/// Draws `x₀ ~ N(0, I)`, `x_t ~ N(A x_{t−1} + B u_t, I)` and
/// `y_t ~ Poisson(exp(C (x_t + h) + d))` for `t = 1..T`.
pub fn sample_plds_trial(
    params: &SharedParams,
    modulator: &DVector<f64>,
    stimulus: &DMatrix<f64>,
    seed: u64,
) -> Result<TrialSample> {
    let k = params.latent_dim();
    let p = params.num_neurons();
    let t_len = stimulus.nrows();
    ensure_shape!(stimulus.ncols() == params.input_dim(), "stimulus has {} columns, expected {}", stimulus.ncols(), params.input_dim());
    ensure_shape!(modulator.len() == k, "modulator must have {k} entries");
    let rho = spectral_radius(&params.dynamics);
    if rho >= 1.0 {
        log::warn!("sampling from dynamics with spectral radius {rho:.4} >= 1");
    }
    let mut rng = rng_from(seed);
    let mut latents = DMatrix::zeros(t_len + 1, k);
    let mut x = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    latents.row_mut(0).copy_from(&x.transpose());
    let mut counts = Vec::with_capacity(t_len * p);
    let mut log_rates = DMatrix::zeros(t_len, p);
    for t in 0..t_len {
        let u = stimulus.row(t).transpose();
        let noise = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        x = &params.dynamics * &x + &params.input_map * u + noise;
        latents.row_mut(t + 1).copy_from(&x.transpose());
        let z = &params.loading * (&x + modulator) + &params.offset;
        for j in 0..p {
            if !(z[j] <= MAX_LOG_RATE) {
                return Err(Error::Domain(format!(
                    "log rate {:.3} exceeds {MAX_LOG_RATE} for neuron {j} at bin {t}",
                    z[j]
                )));
            }
            log_rates[(t, j)] = z[j];
            counts.push(sample_poisson(&mut rng, z[j].exp()));
        }
    }
    Ok(TrialSample {
        latents,
        counts,
        log_rates,
    })
}

pub(crate) fn sample_poisson(rng: &mut ChaCha8Rng, rate: f64) -> u32 {
    if rate < 1e-12 {
        return 0;
    }
    let draw: f64 = Poisson::new(rate).expect("positive finite rate").sample(rng);
    draw as u32
}

/// Samples trial `i` of a Model I / Model II parameter set.
pub fn sample_trial<M: TrialModel + ?Sized>(
    model: &M,
    trial: usize,
    stimulus: &DMatrix<f64>,
    seed: u64,
) -> Result<TrialSample> {
    if trial >= model.num_trials() {
        return Err(Error::Shape(format!("trial {trial} out of range")));
    }
    let (params, h) = model.trial_params(trial);
    sample_plds_trial(&params, &h, stimulus, seed)
}

/// Samples every trial in parallel; trial `i` uses `derive_seed(master, TRIALS, i)`.
pub fn sample_dataset<M: TrialModel + ?Sized>(
    model: &M,
    stimuli: &[DMatrix<f64>],
    bin_width: f64,
    master_seed: u64,
) -> Result<(SpikeDataset, Vec<TrialSample>)> {
    let r = model.num_trials();
    ensure_shape!(stimuli.len() == r, "one stimulus matrix per trial required");
    let samples = (0..r)
        .into_par_iter()
        .map(|i| sample_trial(model, i, &stimuli[i], derive_seed(master_seed, streams::TRIALS, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let t_len = stimuli.first().map_or(0, |s| s.nrows());
    let d = stimuli.first().map_or(0, |s| s.ncols());
    let p = samples.first().map_or(0, |s| s.log_rates.ncols());
    let mut counts = Vec::with_capacity(r * t_len * p);
    let mut stim = Vec::with_capacity(r * t_len * d);
    for (s, u) in samples.iter().zip(stimuli) {
        counts.extend_from_slice(&s.counts);
        for t in 0..t_len {
            stim.extend(u.row(t).iter().copied());
        }
    }
    let ds = SpikeDataset::new(counts, stim, r, t_len, p, d, bin_width)?;
    Ok((ds, samples))
}

/// Sweep of 2x2 symmetric dynamics matrices whose stationary correlation follows
/// `target_correlations` while the stationary trace stays at `total_variance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSweepSpec {
    pub target_correlations: Vec<f64>,
    pub total_variance: f64,
}

impl CorrelationSweepSpec {
    pub fn linear(num_trials: usize, lo: f64, hi: f64, total_variance: f64) -> Self {
        let target_correlations = (0..num_trials)
            .map(|i| {
                if num_trials == 1 {
                    0.5 * (lo + hi)
                } else {
                    lo + (hi - lo) * i as f64 / (num_trials - 1) as f64
                }
            })
            .collect();
        Self {
            target_correlations,
            total_variance,
        }
    }
}

/// Returns `r x 4`, row `i` the row-major `A_i = [[α, β], [β, α]]`.
///
/// `A_i` has eigenvalues `λ± = α ± β` along `(1, ±1)`, giving stationary
/// variances `v± = 1 / (1 − λ±²)` in that basis. Correlation `c` and trace `V`
/// fix `v± = V (1 ± c) / 2`, hence `λ± = sqrt(1 − 1/v±)`.
pub fn build_correlation_sweep(spec: &CorrelationSweepSpec) -> Result<DMatrix<f64>> {
    let total = spec.total_variance;
    if !(total > 0.0) {
        return Err(Error::Domain("total variance must be positive".into()));
    }
    let r = spec.target_correlations.len();
    let mut out = DMatrix::zeros(r, 4);
    for (i, &c) in spec.target_correlations.iter().enumerate() {
        if !(c > -1.0 && c < 1.0) {
            return Err(Error::Domain(format!("target correlation {c} outside (-1, 1)")));
        }
        let v_plus = 0.5 * total * (1.0 + c);
        let v_minus = 0.5 * total * (1.0 - c);
        if v_plus <= 1.0 || v_minus <= 1.0 {
            return Err(Error::Domain(format!(
                "correlation {c} with total variance {total} needs an eigenvalue of modulus >= 1"
            )));
        }
        let l_plus = (1.0 - 1.0 / v_plus).sqrt();
        let l_minus = (1.0 - 1.0 / v_minus).sqrt();
        let alpha = 0.5 * (l_plus + l_minus);
        let beta = 0.5 * (l_plus - l_minus);
        out.row_mut(i).copy_from_slice(&[alpha, beta, beta, alpha]);
    }
    Ok(out)
}

/// Neuron group assignment, one label per neuron.
pub type Groups = Vec<usize>;

fn two_groups(p: usize) -> Groups {
    (0..p).map(|j| if j < p / 2 { 0 } else { 1 }).collect()
}

/// Configuration of the rate-modulation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationExperimentSpec {
    pub num_neurons: usize,
    pub num_trials: usize,
    pub num_bins: usize,
    pub latent_dim: usize,
    pub bin_width: f64,
    pub grating_hz: f64,
    pub base_rate_hz: f64,
    pub loading_magnitude: f64,
    pub modulator_sigma2: f64,
    pub modulator_tau2: f64,
}

impl Default for ModulationExperimentSpec {
    fn default() -> Self {
        Self {
            num_neurons: 40,
            num_trials: 100,
            num_bins: 200,
            latent_dim: 4,
            bin_width: 0.05,
            grating_hz: 0.4,
            base_rate_hz: 5.0,
            loading_magnitude: 0.5,
            modulator_sigma2: 4.0,
            modulator_tau2: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModulationExperiment {
    pub spec: ModulationExperimentSpec,
    pub params: ModelIParams,
    pub hyper: Hyperparams,
    pub dataset: SpikeDataset,
    pub groups: Groups,
    /// One `T x p` matrix of true log rates per trial.
    pub true_log_rates: Vec<DMatrix<f64>>,
    pub latents: Vec<DMatrix<f64>>,
}

/// Two groups of neurons, each driven by its own slowly drifting modulator
/// coordinate, with a drifting grating switched on for the middle half of each trial.
///
/// Latent dimensions `0, 1` carry the group-specific fluctuations and
/// modulators; dimensions `2, 3` carry the stimulus drive.
pub fn make_modulation_experiment(spec: &ModulationExperimentSpec, seed: u64) -> Result<ModulationExperiment> {
    let (p, r, t_len, k) = (spec.num_neurons, spec.num_trials, spec.num_bins, spec.latent_dim);
    if k != 4 || p < 2 {
        return Err(Error::Domain("the modulation experiment uses k = 4 and p >= 2".into()));
    }
    let groups = two_groups(p);
    let dynamics = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.5, 0.8, 0.8]));
    let input_map = DMatrix::from_row_slice(4, 3, &[
        0.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, //
        0.2, 0.0, 0.1, //
        0.0, 0.2, 0.1,
    ]);
    let mut loading = DMatrix::zeros(p, k);
    for (j, &g) in groups.iter().enumerate() {
        loading[(j, g)] = spec.loading_magnitude;
        loading[(j, 2 + g)] = spec.loading_magnitude;
    }
    let offset = DVector::from_element(p, (spec.base_rate_hz * spec.bin_width).ln());
    let shared = SharedParams::new(dynamics, input_map, loading, offset)?;

    let hyper = Hyperparams::new(spec.modulator_sigma2, spec.modulator_tau2, Hyperparams::DEFAULT_EPS)?;
    let group_mods = sample_modulators(&hyper, r, 2, derive_seed(seed, streams::MODULATORS, 0))?;
    let mut modulators = DMatrix::zeros(r, k);
    modulators.view_mut((0, 0), (r, 2)).copy_from(&group_mods);
    let params = ModelIParams::new(shared, modulators)?;

    let grating = GratingStimulus {
        frequency_hz: spec.grating_hz,
        bin_width_s: spec.bin_width,
        on_start: t_len / 4,
        on_end: 3 * t_len / 4,
    };
    let u = make_grating_stimulus(&grating, t_len)?;
    let stimuli = vec![u; r];
    let (dataset, samples) = sample_dataset(&params, &stimuli, spec.bin_width, seed)?;
    let (true_log_rates, latents) = samples.into_iter().map(|s| (s.log_rates, s.latents)).unzip();
    Ok(ModulationExperiment {
        spec: spec.clone(),
        params,
        hyper,
        dataset,
        groups,
        true_log_rates,
        latents,
    })
}

/// Configuration of the correlation-sweep experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepExperimentSpec {
    pub num_neurons: usize,
    pub num_trials: usize,
    pub num_bins: usize,
    pub bin_width: f64,
    pub base_rate_hz: f64,
    pub loading_magnitude: f64,
    pub correlation_range: (f64, f64),
    pub total_variance: f64,
}

impl Default for SweepExperimentSpec {
    fn default() -> Self {
        Self {
            num_neurons: 40,
            num_trials: 100,
            num_bins: 200,
            bin_width: 0.05,
            base_rate_hz: 5.0,
            loading_magnitude: 0.5,
            correlation_range: (-0.95, 0.95),
            total_variance: 44.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepExperiment {
    pub spec: SweepExperimentSpec,
    pub params: ModelIIParams,
    pub dataset: SpikeDataset,
    pub groups: Groups,
    /// Stationary latent correlation of each trial.
    pub true_correlations: Vec<f64>,
    pub true_log_rates: Vec<DMatrix<f64>>,
}

/// Spontaneous activity from two groups whose latent correlation sweeps
/// across trials while the stationary covariance trace stays fixed.
pub fn make_sweep_experiment(spec: &SweepExperimentSpec, seed: u64) -> Result<SweepExperiment> {
    let (p, r, t_len) = (spec.num_neurons, spec.num_trials, spec.num_bins);
    let groups = two_groups(p);
    let sweep = CorrelationSweepSpec::linear(r, spec.correlation_range.0, spec.correlation_range.1, spec.total_variance);
    let per_trial = build_correlation_sweep(&sweep)?;
    let mean = DVector::from_fn(4, |c, _| per_trial.column(c).mean());
    let mut loading = DMatrix::zeros(p, 2);
    for (j, &g) in groups.iter().enumerate() {
        loading[(j, g)] = spec.loading_magnitude;
    }
    let offset = DVector::from_element(p, (spec.base_rate_hz * spec.bin_width).ln());
    let params = ModelIIParams::new(DMatrix::zeros(2, 0), loading, offset, mean, per_trial)?;
    let stimuli = vec![DMatrix::zeros(t_len, 0); r];
    let (dataset, samples) = sample_dataset(&params, &stimuli, spec.bin_width, seed)?;
    Ok(SweepExperiment {
        spec: spec.clone(),
        params,
        dataset,
        groups,
        true_correlations: sweep.target_correlations,
        true_log_rates: samples.into_iter().map(|s| s.log_rates).collect(),
    })
}

/// Model II parameters with every trial sharing `dynamics`.
pub fn constant_dynamics(shared: &SharedParams, num_trials: usize) -> Result<ModelIIParams> {
    let a = vec_row_major(&shared.dynamics);
    let per_trial = DMatrix::from_fn(num_trials, a.len(), |_, c| a[c]);
    ModelIIParams::new(shared.input_map.clone(), shared.loading.clone(), shared.offset.clone(), a, per_trial)
}
