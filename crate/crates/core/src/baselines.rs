//! Stationary PLDS baselines: one model for all trials, or one model per trial.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SpikeDataset;
use crate::vbem::{self, default_hyper, init, FitConfig, FitResult, HoldoutMask, Variant};

/// A single PLDS over all trials: Model I with `σ² = ε = 0`, so every
/// modulator is pinned at zero. `τ²` and the ridges are taken from the config.
pub fn fit_fixed_plds(dataset: &SpikeDataset, config: &FitConfig) -> Result<FitResult> {
    let mut cfg = config.clone();
    cfg.variant = Variant::ModelI;
    let mut hyper = cfg.initial_hyper.clone().unwrap_or_else(|| default_hyper(dataset.num_trials()));
    hyper.sigma2 = 0.0;
    hyper.eps = 0.0;
    cfg.initial_hyper = Some(hyper);
    vbem::fit(dataset, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub trial_id: u32,
    pub message: String,
}

/// One PLDS per trial; failed trials are recorded and left as `None`.
#[derive(Debug, Clone)]
pub struct IndependentFits {
    pub fits: Vec<Option<FitResult>>,
    pub failures: Vec<TrialFailure>,
}

impl IndependentFits {
    pub fn num_succeeded(&self) -> usize {
        self.fits.iter().filter(|f| f.is_some()).count()
    }
}

/// Fits each trial on its own, starting every fit from the warm start computed
/// on the full dataset.
pub fn fit_independent_plds(dataset: &SpikeDataset, config: &FitConfig) -> Result<IndependentFits> {
    config.validate()?;
    let r = dataset.num_trials();
    if r == 0 {
        return Err(Error::Domain("dataset has no trials".into()));
    }
    let mut cfg = config.clone();
    if cfg.initial_params.is_none() {
        let mask = HoldoutMask::random(config.seed, dataset.trial_ids(), dataset.num_bins(), config.holdout_fraction);
        cfg.initial_params = Some(init::initialize(dataset, config.latent_dim, &mask).map_err(|e| e.in_phase("init", 0))?);
    }
    let results: Vec<Result<FitResult>> = (0..r)
        .into_par_iter()
        .map(|i| {
            let single = dataset.select_trials(&[i])?;
            fit_fixed_plds(&single, &cfg)
        })
        .collect();
    let mut fits = Vec::with_capacity(r);
    let mut failures = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(f) => fits.push(Some(f)),
            Err(e) => {
                log::warn!("independent fit of trial {i} failed: {e}");
                failures.push(TrialFailure {
                    trial: i,
                    trial_id: dataset.trial_ids()[i],
                    message: e.to_string(),
                });
                fits.push(None);
            }
        }
    }
    Ok(IndependentFits { fits, failures })
}
