//! Held-out bins and the one-step-ahead predictive score.

use nalgebra::DVector;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::model::log_factorial;
use crate::simulator::{derive_seed, rng_from, streams};

use super::messages::{Emission, ForwardMessages, TrialInput};

/// Bins excluded from inference and used for scoring, per trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutMask {
    bins: Vec<Vec<bool>>,
}

impl HoldoutMask {
    pub fn none(num_trials: usize, num_bins: usize) -> Self {
        Self {
            bins: vec![vec![false; num_bins]; num_trials],
        }
    }

    /// Holds out `round(fraction · T)` bins of every trial, chosen from a stream
    /// keyed by `(seed, trial id)` so a trial's mask does not depend on which
    /// other trials are present.
    pub fn random(seed: u64, trial_ids: &[u32], num_bins: usize, fraction: f64) -> Self {
        let n = ((fraction.clamp(0.0, 1.0) * num_bins as f64).round() as usize).min(num_bins);
        let bins = trial_ids
            .iter()
            .map(|&id| {
                let mut mask = vec![false; num_bins];
                let mut rng = rng_from(derive_seed(seed, streams::HOLDOUT, id as u64));
                for t in sample(&mut rng, num_bins, n).into_iter() {
                    mask[t] = true;
                }
                mask
            })
            .collect();
        Self { bins }
    }

    pub fn trial(&self, trial: usize) -> &[bool] {
        &self.bins[trial]
    }

    pub fn is_held_out(&self, trial: usize, bin: usize) -> bool {
        self.bins[trial][bin]
    }

    pub fn num_held_out(&self) -> usize {
        self.bins.iter().map(|b| b.iter().filter(|&&m| m).count()).sum()
    }

    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            bins: positions.iter().map(|&i| self.bins[i].clone()).collect(),
        }
    }
}

/// Log-likelihood of the held-out bins of one trial and their number.
///
/// Each held-out `y_t` is scored under a Poisson whose mean is the lognormal
/// mean `E[exp(c_jᵀ x_t + d_j)]` of the one-step prediction of `x_t`.
pub fn one_step_ahead_score(input: &TrialInput, forward: &ForwardMessages) -> (f64, usize) {
    let Emission::Poisson { loading, offset, counts } = &input.emission else {
        return (0.0, 0);
    };
    let p = loading.nrows();
    let mut total = 0.0;
    let mut bins = 0;
    for t in 0..input.num_bins() {
        if !input.is_held_out(t) {
            continue;
        }
        let pred = &forward.predicted[t];
        let cv = *loading * &pred.cov;
        let log_mean = DVector::from_fn(p, |j, _| {
            loading.row(j).dot(&pred.mean.transpose()) + 0.5 * cv.row(j).dot(&loading.row(j)) + offset[j]
        });
        for j in 0..p {
            let y = counts[t * p + j];
            total += y as f64 * log_mean[j] - log_mean[j].exp() - log_factorial(y);
        }
        bins += 1;
    }
    (total, bins)
}
