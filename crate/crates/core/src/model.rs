//! Parameter containers, datasets and the elementary Poisson rate computations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::linalg::unvec_row_major;

/// Parameters shared by every trial of a stationary PLDS.
///
/// The state noise covariance is the identity and the initial state is
/// standard normal; neither is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    /// `k x k` state transition matrix.
    pub dynamics: DMatrix<f64>,
    /// `k x d` stimulus gain. Zero columns when there is no stimulus.
    pub input_map: DMatrix<f64>,
    /// `p x k` loading from latent space to log rates.
    pub loading: DMatrix<f64>,
    /// Per-neuron log-rate offset.
    pub offset: DVector<f64>,
}

impl SharedParams {
    pub fn new(
        dynamics: DMatrix<f64>,
        input_map: DMatrix<f64>,
        loading: DMatrix<f64>,
        offset: DVector<f64>,
    ) -> Result<Self> {
        let k = dynamics.nrows();
        ensure_shape!(dynamics.ncols() == k, "dynamics must be square");
        ensure_shape!(input_map.nrows() == k, "input map must have {k} rows");
        ensure_shape!(loading.ncols() == k, "loading must have {k} columns");
        ensure_shape!(
            loading.nrows() == offset.len(),
            "loading has {} rows but offset has {} entries",
            loading.nrows(),
            offset.len()
        );
        Ok(Self {
            dynamics,
            input_map,
            loading,
            offset,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.dynamics.nrows()
    }

    pub fn num_neurons(&self) -> usize {
        self.loading.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.ncols()
    }
}

/// Model I: stationary parameters plus one modulator vector per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIParams {
    pub shared: SharedParams,
    /// `r x k`, row `i` is the modulator of trial `i`.
    pub modulators: DMatrix<f64>,
}

impl ModelIParams {
    pub fn new(shared: SharedParams, modulators: DMatrix<f64>) -> Result<Self> {
        ensure_shape!(
            modulators.ncols() == shared.latent_dim(),
            "modulators must have {} columns",
            shared.latent_dim()
        );
        Ok(Self { shared, modulators })
    }

    pub fn num_trials(&self) -> usize {
        self.modulators.nrows()
    }

    pub fn modulator(&self, trial: usize) -> DVector<f64> {
        self.modulators.row(trial).transpose()
    }
}

/// Model II: the dynamics matrix varies across trials around a mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIIParams {
    pub input_map: DMatrix<f64>,
    pub loading: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// Row-major vectorization of the mean dynamics matrix (length `k²`).
    pub mean_dynamics: DVector<f64>,
    /// `r x k²`, row `i` is the row-major vectorized dynamics of trial `i`.
    pub per_trial_dynamics: DMatrix<f64>,
}

impl ModelIIParams {
    pub fn new(
        input_map: DMatrix<f64>,
        loading: DMatrix<f64>,
        offset: DVector<f64>,
        mean_dynamics: DVector<f64>,
        per_trial_dynamics: DMatrix<f64>,
    ) -> Result<Self> {
        let k = loading.ncols();
        ensure_shape!(input_map.nrows() == k, "input map must have {k} rows");
        ensure_shape!(loading.nrows() == offset.len(), "loading/offset mismatch");
        ensure_shape!(mean_dynamics.len() == k * k, "mean dynamics must have k² entries");
        ensure_shape!(
            per_trial_dynamics.ncols() == k * k,
            "per-trial dynamics must have k² columns"
        );
        Ok(Self {
            input_map,
            loading,
            offset,
            mean_dynamics,
            per_trial_dynamics,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    pub fn num_trials(&self) -> usize {
        self.per_trial_dynamics.nrows()
    }

    pub fn dynamics(&self, trial: usize) -> DMatrix<f64> {
        let k = self.latent_dim();
        let row: Vec<f64> = self.per_trial_dynamics.row(trial).iter().copied().collect();
        unvec_row_major(&row, k, k).expect("shape checked at construction")
    }

    /// Stationary parameter block for one trial.
    pub fn trial_params(&self, trial: usize) -> SharedParams {
        SharedParams {
            dynamics: self.dynamics(trial),
            input_map: self.input_map.clone(),
            loading: self.loading.clone(),
            offset: self.offset.clone(),
        }
    }
}

/// Parameter blocks carrying an isotropic ridge prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeBlock {
    /// Stimulus gain `B`.
    InputMap,
    /// Loading `C`.
    Loading,
    /// Offset `d`.
    Offset,
    /// Shared dynamics (Model I) or the mean dynamics (Model II).
    Dynamics,
}

impl RidgeBlock {
    pub const ALL: [RidgeBlock; 4] = [
        RidgeBlock::InputMap,
        RidgeBlock::Loading,
        RidgeBlock::Offset,
        RidgeBlock::Dynamics,
    ];
}

/// Kernel and ridge hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Kernel output variance.
    pub sigma2: f64,
    /// Squared length-scale, in units of trials squared.
    pub tau2: f64,
    /// Diagonal jitter added to same-trial kernel blocks. Held fixed.
    pub eps: f64,
    /// Ridge precision per parameter block.
    pub ridge: BTreeMap<RidgeBlock, f64>,
}

impl Hyperparams {
    pub const DEFAULT_EPS: f64 = 1e-3;

    pub fn new(sigma2: f64, tau2: f64, eps: f64) -> Result<Self> {
        let h = Self {
            sigma2,
            tau2,
            eps,
            ridge: RidgeBlock::ALL.iter().map(|b| (*b, 1.0)).collect(),
        };
        h.validate()?;
        Ok(h)
    }

    /// Hyperparameters that switch the trial-varying prior off entirely.
    pub fn stationary() -> Self {
        Self {
            sigma2: 0.0,
            tau2: 1.0,
            eps: 0.0,
            ridge: RidgeBlock::ALL.iter().map(|b| (*b, 1.0)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(Error::Domain(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if !(self.tau2 > 0.0) || !self.tau2.is_finite() {
            return Err(Error::Domain(format!("tau2 must be > 0, got {}", self.tau2)));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Domain(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.sigma2 > 0.0 && self.eps <= 0.0 {
            return Err(Error::Domain(
                "eps must be positive whenever sigma2 > 0".into(),
            ));
        }
        for (block, phi) in &self.ridge {
            if !(*phi > 0.0) || !phi.is_finite() {
                return Err(Error::Domain(format!("ridge precision for {block:?} must be > 0")));
            }
        }
        Ok(())
    }

    /// True when the kernel is identically zero (`σ² = ε = 0`).
    pub fn is_degenerate(&self) -> bool {
        self.sigma2 == 0.0 && self.eps == 0.0
    }

    pub fn ridge(&self, block: RidgeBlock) -> f64 {
        self.ridge.get(&block).copied().unwrap_or(1.0)
    }
}

/// Spike counts and stimuli for `r` trials of `T` bins over `p` neurons.
///
/// Both tensors are stored flat in trial-major, time-major, neuron-minor order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeDataset {
    counts: Vec<u32>,
    stimulus: Vec<f64>,
    num_trials: usize,
    num_bins: usize,
    num_neurons: usize,
    input_dim: usize,
    /// Seconds per time bin.
    pub bin_width: f64,
    /// Experiment-wide trial numbers, strictly increasing. Used as GP inputs.
    trial_ids: Vec<u32>,
}

impl SpikeDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        counts: Vec<u32>,
        stimulus: Vec<f64>,
        num_trials: usize,
        num_bins: usize,
        num_neurons: usize,
        input_dim: usize,
        bin_width: f64,
    ) -> Result<Self> {
        let ids = (0..num_trials as u32).collect();
        Self::with_trial_ids(
            counts, stimulus, num_trials, num_bins, num_neurons, input_dim, bin_width, ids,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_trial_ids(
        counts: Vec<u32>,
        stimulus: Vec<f64>,
        num_trials: usize,
        num_bins: usize,
        num_neurons: usize,
        input_dim: usize,
        bin_width: f64,
        trial_ids: Vec<u32>,
    ) -> Result<Self> {
        ensure_shape!(
            counts.len() == num_trials * num_bins * num_neurons,
            "counts length {} != {num_trials}*{num_bins}*{num_neurons}",
            counts.len()
        );
        ensure_shape!(
            stimulus.len() == num_trials * num_bins * input_dim,
            "stimulus length {} != {num_trials}*{num_bins}*{input_dim}",
            stimulus.len()
        );
        ensure_shape!(trial_ids.len() == num_trials, "one trial id per trial required");
        if trial_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("trial ids must be strictly increasing".into()));
        }
        if !(bin_width > 0.0) {
            return Err(Error::Domain("bin width must be positive".into()));
        }
        if stimulus.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("stimulus contains non-finite values".into()));
        }
        Ok(Self {
            counts,
            stimulus,
            num_trials,
            num_bins,
            num_neurons,
            input_dim,
            bin_width,
            trial_ids,
        })
    }

    /// Builds a dataset from signed counts, rejecting negative entries.
    #[allow(clippy::too_many_arguments)]
    pub fn from_signed_counts(
        counts: &[i64],
        stimulus: Vec<f64>,
        num_trials: usize,
        num_bins: usize,
        num_neurons: usize,
        input_dim: usize,
        bin_width: f64,
    ) -> Result<Self> {
        let counts = counts
            .iter()
            .enumerate()
            .map(|(idx, &c)| {
                u32::try_from(c)
                    .map_err(|_| Error::Domain(format!("invalid spike count {c} at flat index {idx}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts, stimulus, num_trials, num_bins, num_neurons, input_dim, bin_width)
    }

    pub fn num_trials(&self) -> usize {
        self.num_trials
    }
    pub fn num_bins(&self) -> usize {
        self.num_bins
    }
    pub fn num_neurons(&self) -> usize {
        self.num_neurons
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn trial_ids(&self) -> &[u32] {
        &self.trial_ids
    }
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }
    pub fn stimulus(&self) -> &[f64] {
        &self.stimulus
    }

    /// Counts for one trial, `T x p` row-major.
    pub fn trial_counts(&self, trial: usize) -> &[u32] {
        let n = self.num_bins * self.num_neurons;
        &self.counts[trial * n..(trial + 1) * n]
    }

    pub fn count(&self, trial: usize, bin: usize, neuron: usize) -> u32 {
        self.counts[(trial * self.num_bins + bin) * self.num_neurons + neuron]
    }

    /// Stimulus for one trial as a `T x d` matrix.
    pub fn trial_stimulus(&self, trial: usize) -> DMatrix<f64> {
        let n = self.num_bins * self.input_dim;
        DMatrix::from_row_slice(
            self.num_bins,
            self.input_dim,
            &self.stimulus[trial * n..(trial + 1) * n],
        )
    }

    /// Sub-dataset restricted to the given trial positions (not ids).
    pub fn select_trials(&self, positions: &[usize]) -> Result<Self> {
        let mut counts = Vec::new();
        let mut stimulus = Vec::new();
        let mut ids = Vec::new();
        for &i in positions {
            if i >= self.num_trials {
                return Err(Error::Shape(format!("trial position {i} out of range")));
            }
            counts.extend_from_slice(self.trial_counts(i));
            let n = self.num_bins * self.input_dim;
            stimulus.extend_from_slice(&self.stimulus[i * n..(i + 1) * n]);
            ids.push(self.trial_ids[i]);
        }
        Self::with_trial_ids(
            counts,
            stimulus,
            positions.len(),
            self.num_bins,
            self.num_neurons,
            self.input_dim,
            self.bin_width,
            ids,
        )
    }
}

/// Log mean firing rates of one trial, `T x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRateTrace {
    z: DMatrix<f64>,
}

impl LogRateTrace {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("log-rate trace contains non-finite values".into()));
        }
        Ok(Self { z })
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.z
    }
}

/// `C (x + h) + d`.
pub fn log_rate(
    loading: &DMatrix<f64>,
    state: &DVector<f64>,
    modulator: &DVector<f64>,
    offset: &DVector<f64>,
) -> Result<DVector<f64>> {
    let k = loading.ncols();
    ensure_shape!(state.len() == k, "state has {} entries, expected {k}", state.len());
    ensure_shape!(modulator.len() == k, "modulator has {} entries, expected {k}", modulator.len());
    ensure_shape!(
        offset.len() == loading.nrows(),
        "offset has {} entries, expected {}",
        offset.len(),
        loading.nrows()
    );
    Ok(loading * (state + modulator) + offset)
}

pub fn log_factorial(y: u32) -> f64 {
    libm::lgamma(y as f64 + 1.0)
}

/// Poisson log-likelihood `Σ y z − exp(z) − log y!` over a `T x p` block.
///
/// `counts` is row-major with the same shape as `log_rates`.
pub fn poisson_loglik(counts: &[u32], log_rates: &DMatrix<f64>) -> Result<f64> {
    let (t_len, p) = log_rates.shape();
    ensure_shape!(
        counts.len() == t_len * p,
        "counts length {} does not match {t_len}x{p} log rates",
        counts.len()
    );
    let mut total = 0.0;
    for t in 0..t_len {
        for j in 0..p {
            let z = log_rates[(t, j)];
            if !z.is_finite() {
                return Err(Error::Domain(format!("non-finite log rate at bin {t}, neuron {j}")));
            }
            let y = counts[t * p + j];
            total += y as f64 * z - z.exp() - log_factorial(y);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vec_row_major;
    use proptest::prelude::*;

    #[test]
    fn log_rate_zero_case() {
        let c = DMatrix::identity(2, 2);
        let z = DVector::zeros(2);
        let out = log_rate(&c, &z, &z, &z).unwrap();
        assert_eq!(out, DVector::zeros(2));
    }

    #[test]
    fn log_rate_direct_evaluation() {
        let c = DMatrix::identity(2, 2);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let h = DVector::from_vec(vec![0.5, -0.5]);
        let d = DVector::from_vec(vec![0.1, 0.1]);
        let out = log_rate(&c, &x, &h, &d).unwrap();
        assert!((out[0] - 1.6).abs() < 1e-15);
        assert!((out[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn log_rate_without_modulator_is_plain_plds() {
        let c = DMatrix::from_row_slice(3, 2, &[0.5, 0.0, 0.0, 0.5, 0.2, -0.3]);
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let d = DVector::from_vec(vec![-1.0, 0.0, 1.0]);
        let out = log_rate(&c, &x, &DVector::zeros(2), &d).unwrap();
        assert_eq!(out, &c * &x + &d);
    }

    #[test]
    fn log_rate_rejects_bad_shapes() {
        let c = DMatrix::identity(2, 2);
        let bad = DVector::zeros(3);
        let ok = DVector::zeros(2);
        assert!(matches!(log_rate(&c, &bad, &ok, &ok), Err(Error::Shape(_))));
        assert!(matches!(log_rate(&c, &ok, &ok, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn poisson_loglik_examples() {
        let z0 = DMatrix::from_element(1, 1, 0.0);
        assert!((poisson_loglik(&[0], &z0).unwrap() + 1.0).abs() < 1e-15);
        assert!((poisson_loglik(&[1], &z0).unwrap() + 1.0).abs() < 1e-15);
        let z = DMatrix::from_element(1, 1, 2f64.ln());
        let expected = 2f64.ln() - 2.0;
        assert!((poisson_loglik(&[2], &z).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 1.306_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn poisson_loglik_rejects_non_finite() {
        let z = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(poisson_loglik(&[1], &z), Err(Error::Domain(_))));
        let z = DMatrix::from_element(1, 1, f64::INFINITY);
        assert!(matches!(poisson_loglik(&[1], &z), Err(Error::Domain(_))));
    }

    #[test]
    fn negative_counts_are_rejected_at_ingestion() {
        let err = SpikeDataset::from_signed_counts(&[1, -1], vec![], 1, 2, 1, 0, 0.05);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn log_trace_rejects_nan() {
        let z = DMatrix::from_row_slice(1, 2, &[0.0, f64::NAN]);
        assert!(LogRateTrace::new(z).is_err());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::new(1.0, 100.0, 1e-3).is_ok());
        assert!(Hyperparams::new(-1.0, 100.0, 1e-3).is_err());
        assert!(Hyperparams::new(1.0, 0.0, 1e-3).is_err());
        assert!(Hyperparams::new(1.0, 1.0, 0.0).is_err());
        assert!(Hyperparams::stationary().validate().is_ok());
    }

    proptest! {
        #[test]
        fn log_rate_is_affine(
            c in proptest::collection::vec(-2.0f64..2.0, 6),
            x1 in proptest::collection::vec(-3.0f64..3.0, 2),
            x2 in proptest::collection::vec(-3.0f64..3.0, 2),
            h in proptest::collection::vec(-3.0f64..3.0, 2),
            d in proptest::collection::vec(-3.0f64..3.0, 3),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let c = DMatrix::from_row_slice(3, 2, &c);
            let (x1, x2) = (DVector::from_vec(x1), DVector::from_vec(x2));
            let (h, d) = (DVector::from_vec(h), DVector::from_vec(d));
            let zero_k = DVector::zeros(2);
            let zero_p = DVector::zeros(3);
            let lhs = log_rate(&c, &(&x1 * alpha + &x2 * beta), &h, &d).unwrap();
            let rhs = log_rate(&c, &x1, &zero_k, &zero_p).unwrap() * alpha
                + log_rate(&c, &x2, &zero_k, &zero_p).unwrap() * beta
                + log_rate(&c, &zero_k, &h, &d).unwrap();
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }

        #[test]
        fn poisson_loglik_peaks_at_log_count(
            y in 1u32..200,
            shift in -3.0f64..3.0,
        ) {
            let at_mode = DMatrix::from_element(1, 1, (y as f64).ln());
            let off = DMatrix::from_element(1, 1, (y as f64).ln() + shift);
            prop_assert!(poisson_loglik(&[y], &off).unwrap() <= poisson_loglik(&[y], &at_mode).unwrap() + 1e-12);
        }

        #[test]
        fn vec_unvec_round_trip(k in 1usize..6, seed in proptest::collection::vec(-5.0f64..5.0, 36)) {
            let m = DMatrix::from_fn(k, k, |i, j| seed[i * 6 + j]);
            let v = vec_row_major(&m);
            prop_assert_eq!(unvec_row_major(v.as_slice(), k, k).unwrap(), m);
        }
    }
}
