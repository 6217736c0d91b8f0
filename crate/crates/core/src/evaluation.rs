//! Covariance and correlation summaries, rate RMSE, and held-out trial prediction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::gp::{gp_predict, scalar_cross_kernel, GaussianBelief};
use crate::linalg::{kron_identity, solve_discrete_lyapunov, spectral_radius, unvec_row_major};
use crate::model::{Hyperparams, SharedParams, SpikeDataset};
use crate::simulator::{derive_seed, sample_plds_trial, streams};
use crate::vbem::expectations::{block_diagonal, LatentParams, ParamPosterior};
use crate::vbem::TrialLatents;

/// Pair-averaged pooled ("total") and within-trial ("conditional") covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    /// Normalized by the reference total.
    pub total: f64,
    pub conditional: f64,
    pub raw_total: f64,
    pub raw_conditional: f64,
    pub total_pairs: DMatrix<f64>,
    pub conditional_pairs: DMatrix<f64>,
    /// Neurons left out because they had no variance.
    pub excluded: Vec<usize>,
}

impl CovarianceSummary {
    pub fn ratio(&self) -> f64 {
        self.raw_conditional / self.raw_total
    }
}

fn covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let n = samples.nrows();
    let mean = samples.row_mean();
    let centered = DMatrix::from_fn(n, samples.ncols(), |i, j| samples[(i, j)] - mean[j]);
    centered.transpose() * &centered / n as f64
}

fn pair_average(m: &DMatrix<f64>, keep: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, &i) in keep.iter().enumerate() {
        for &j in &keep[a + 1..] {
            sum += m[(i, j)];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `trials` holds one `T x p` matrix per trial (log rates or stabilized counts).
///
/// Covariances are population (`1/n`) estimates. With `reference_total = None`
/// the summary is normalized by its own total.
pub fn total_and_conditional_covariance(trials: &[DMatrix<f64>], reference_total: Option<f64>) -> Result<CovarianceSummary> {
    let r = trials.len();
    if r < 2 {
        return Err(Error::Domain("need at least two trials".into()));
    }
    let (t_len, p) = trials[0].shape();
    if t_len < 2 {
        return Err(Error::Domain("need at least two bins per trial".into()));
    }
    ensure_shape!(trials.iter().all(|m| m.shape() == (t_len, p)), "all trials must be {t_len} x {p}");
    let mut pooled = DMatrix::zeros(r * t_len, p);
    for (i, m) in trials.iter().enumerate() {
        pooled.view_mut((i * t_len, 0), (t_len, p)).copy_from(m);
    }
    let total_pairs = covariance(&pooled);
    let mut conditional_pairs = DMatrix::zeros(p, p);
    for m in trials {
        conditional_pairs += covariance(m);
    }
    conditional_pairs /= r as f64;

    let (keep, excluded): (Vec<usize>, Vec<usize>) = (0..p).partition(|&j| total_pairs[(j, j)] > 0.0);
    if !excluded.is_empty() {
        log::warn!("{} zero-variance neurons excluded from covariance pairs", excluded.len());
    }
    let raw_total = pair_average(&total_pairs, &keep);
    let raw_conditional = pair_average(&conditional_pairs, &keep);
    let norm = reference_total.unwrap_or(raw_total);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Domain(format!("cannot normalize by reference total {norm}")));
    }
    Ok(CovarianceSummary {
        total: raw_total / norm,
        conditional: raw_conditional / norm,
        raw_total,
        raw_conditional,
        total_pairs,
        conditional_pairs,
        excluded,
    })
}

/// Counts of each trial as `T x p` reals.
pub fn dataset_trials(dataset: &SpikeDataset) -> Vec<DMatrix<f64>> {
    let (t_len, p) = (dataset.num_bins(), dataset.num_neurons());
    (0..dataset.num_trials())
        .map(|i| DMatrix::from_row_iterator(t_len, p, dataset.trial_counts(i).iter().map(|&y| y as f64)))
        .collect()
}

/// Anscombe transform `2 sqrt(y + 3/8)`, which makes Poisson variance roughly constant.
pub fn stabilized_counts(dataset: &SpikeDataset) -> Vec<DMatrix<f64>> {
    dataset_trials(dataset)
        .into_iter()
        .map(|m| m.map(|y| 2.0 * (y + 0.375).sqrt()))
        .collect()
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCorrelation {
    pub value: f64,
    /// A group sum was constant; `value` is then 0.
    pub constant: bool,
}

fn num_groups(groups: &[usize]) -> usize {
    groups.iter().copied().max().map_or(0, |g| g + 1)
}

/// Correlation of group-summed activity over time within one trial, averaged
/// over group pairs.
pub fn group_correlation(trial: &DMatrix<f64>, groups: &[usize]) -> Result<GroupCorrelation> {
    ensure_shape!(groups.len() == trial.ncols(), "one group label per neuron required");
    let g = num_groups(groups);
    if g < 2 {
        return Err(Error::Domain("at least two groups are required".into()));
    }
    let sums: Vec<Vec<f64>> = (0..g)
        .map(|grp| {
            (0..trial.nrows())
                .map(|t| groups.iter().enumerate().filter(|(_, &l)| l == grp).map(|(j, _)| trial[(t, j)]).sum())
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    let mut constant = false;
    for a in 0..g {
        for b in a + 1..g {
            match pearson(&sums[a], &sums[b]) {
                Some(c) => total += c,
                None => constant = true,
            }
            pairs += 1;
        }
    }
    Ok(GroupCorrelation {
        value: total / pairs as f64,
        constant,
    })
}

pub fn group_correlation_per_trial(trials: &[DMatrix<f64>], groups: &[usize]) -> Result<Vec<GroupCorrelation>> {
    trials.iter().map(|m| group_correlation(m, groups)).collect()
}

pub fn rmse(predicted: &[f64], reference: &[f64]) -> Result<f64> {
    ensure_shape!(predicted.len() == reference.len(), "length mismatch: {} vs {}", predicted.len(), reference.len());
    if predicted.is_empty() {
        return Err(Error::Domain("rmse of empty input".into()));
    }
    let ss: f64 = predicted.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Latent covariance a trial's dynamics implies: stationary when `A` is stable,
/// otherwise the average marginal covariance over `num_bins` steps from `N(0, I)`.
pub fn implied_latent_covariance(dynamics: &DMatrix<f64>, num_bins: usize) -> Result<DMatrix<f64>> {
    let k = dynamics.nrows();
    let eye = DMatrix::identity(k, k);
    if spectral_radius(dynamics) < 1.0 - 1e-9 {
        return solve_discrete_lyapunov(dynamics, &eye);
    }
    let mut cov = eye.clone();
    let mut acc = DMatrix::zeros(k, k);
    for _ in 0..num_bins.max(1) {
        cov = dynamics * cov * dynamics.transpose() + &eye;
        acc += &cov;
    }
    Ok(acc / num_bins.max(1) as f64)
}

/// Correlation between group-summed log rates under a latent covariance.
///
/// Invariant to invertible changes of latent coordinates, so fitted and true
/// models can be compared directly.
pub fn implied_group_correlation(latent_cov: &DMatrix<f64>, loading: &DMatrix<f64>, groups: &[usize]) -> Result<f64> {
    ensure_shape!(groups.len() == loading.nrows(), "one group label per neuron required");
    let g = num_groups(groups);
    if g < 2 {
        return Err(Error::Domain("at least two groups are required".into()));
    }
    let dirs: Vec<DVector<f64>> = (0..g)
        .map(|grp| {
            let mut u = DVector::zeros(loading.ncols());
            for (j, &l) in groups.iter().enumerate() {
                if l == grp {
                    u += loading.row(j).transpose();
                }
            }
            u
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..g {
        for b in a + 1..g {
            let cab = dirs[a].dot(&(latent_cov * &dirs[b]));
            let caa = dirs[a].dot(&(latent_cov * &dirs[a]));
            let cbb = dirs[b].dot(&(latent_cov * &dirs[b]));
            if caa > 0.0 && cbb > 0.0 {
                total += cab / (caa * cbb).sqrt();
            }
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Implied group correlation of every trial of a fitted model.
pub fn model_group_correlations(params: &ParamPosterior, groups: &[usize], num_bins: usize) -> Result<Vec<f64>> {
    let model = params.point_model2()?;
    (0..model.num_trials())
        .map(|i| {
            let cov = implied_latent_covariance(&model.dynamics(i), num_bins)?;
            implied_group_correlation(&cov, &params.loading, groups)
        })
        .collect()
}

/// Posterior-mean log rates `C (E[x_t] + E[h]) + d` of every trial, `T x p` each.
pub fn posterior_log_rates(params: &ParamPosterior, latents: &[TrialLatents]) -> Vec<DMatrix<f64>> {
    latents
        .iter()
        .enumerate()
        .map(|(i, lat)| {
            let h = match &params.latent {
                LatentParams::ModelI { modulators, .. } => modulators.trial_marginal(i).mean,
                LatentParams::ModelII { .. } => DVector::zeros(params.loading.ncols()),
            };
            let t_len = lat.num_bins();
            let mut z = DMatrix::zeros(t_len, params.loading.nrows());
            for t in 0..t_len {
                let row = &params.loading * (&lat.means[t + 1] + &h) + &params.offset;
                z.set_row(t, &row.transpose());
            }
            z
        })
        .collect()
}

/// Log rates of one fresh draw per trial from a fitted model, with its own
/// parameters and modulator for every trial. Trial `i` is drawn with
/// `derive_seed(seed, MODEL_SAMPLES, i)`.
pub fn sampled_log_rates(models: &[(SharedParams, DVector<f64>)], stimuli: &[DMatrix<f64>], seed: u64) -> Result<Vec<DMatrix<f64>>> {
    ensure_shape!(models.len() == stimuli.len(), "one stimulus per trial required");
    models
        .par_iter()
        .zip(stimuli.par_iter())
        .enumerate()
        .map(|(i, ((params, h), u))| {
            sample_plds_trial(params, h, u, derive_seed(seed, streams::MODEL_SAMPLES, i as u64)).map(|s| s.log_rates)
        })
        .collect()
}

/// Per-trial posterior-mean parameters and modulators of a fit.
pub fn trial_point_params(params: &ParamPosterior) -> Result<Vec<(SharedParams, DVector<f64>)>> {
    match &params.latent {
        LatentParams::ModelI { .. } => {
            let m = params.point_model1()?;
            Ok((0..m.num_trials()).map(|i| (m.shared.clone(), m.modulator(i))).collect())
        }
        LatentParams::ModelII { .. } => {
            let m = params.point_model2()?;
            let k = m.latent_dim();
            Ok((0..m.num_trials()).map(|i| (m.trial_params(i), DVector::zeros(k))).collect())
        }
    }
}

/// Per-trial parameters predicted for unseen trials.
#[derive(Debug, Clone)]
pub struct TrialPrediction {
    pub trial_id: u32,
    pub params: SharedParams,
    pub modulator: DVector<f64>,
    /// Predictive belief over the trial-varying block (`h` or `vec A`).
    pub belief: GaussianBelief,
}

/// GP prediction of the trial-varying parameters at `test_ids` from a fit on `train_ids`.
pub fn predict_trial_params(
    params: &ParamPosterior,
    hyper: &Hyperparams,
    train_ids: &[u32],
    test_ids: &[u32],
) -> Result<Vec<TrialPrediction>> {
    let k = params.loading.ncols();
    ensure_shape!(train_ids.len() == params.num_trials(), "one training id per fitted trial required");
    let degenerate = hyper.is_degenerate();
    let k_train = scalar_cross_kernel(hyper, train_ids, train_ids);
    match &params.latent {
        LatentParams::ModelI { dynamics, modulators } => {
            let shared = SharedParams::new(dynamics.dynamics(), dynamics.input_map(), params.loading.clone(), params.offset.clone())?;
            test_ids
                .iter()
                .map(|&id| {
                    let belief = if degenerate {
                        GaussianBelief::point_mass(DVector::zeros(k))
                    } else {
                        let kt = kron_identity(&k_train, k);
                        let kc = kron_identity(&scalar_cross_kernel(hyper, &[id], train_ids), k);
                        let kss = kron_identity(&scalar_cross_kernel(hyper, &[id], &[id]), k);
                        let n = kt.nrows();
                        gp_predict(
                            &kt,
                            &kc,
                            &kss,
                            &modulators.belief.mean,
                            &DVector::zeros(n),
                            &DVector::zeros(k),
                            &modulators.stacked_lik_precision(),
                        )?
                    };
                    Ok(TrialPrediction {
                        trial_id: id,
                        params: shared.clone(),
                        modulator: belief.mean.clone(),
                        belief,
                    })
                })
                .collect()
        }
        LatentParams::ModelII { dynamics } => {
            let r = train_ids.len();
            let kt = kron_identity(&k_train, k);
            let lik = block_diagonal(&dynamics.lik_precision);
            test_ids
                .iter()
                .map(|&id| {
                    let mut mean = dynamics.mean_dynamics.clone();
                    let mut cov = DMatrix::zeros(k * k, k * k);
                    if !degenerate {
                        let kc = kron_identity(&scalar_cross_kernel(hyper, &[id], train_ids), k);
                        let kss = kron_identity(&scalar_cross_kernel(hyper, &[id], &[id]), k);
                        for l in 0..k {
                            // row l of every trial's A, trial-major
                            let post = DVector::from_fn(r * k, |q, _| dynamics.means[(q / k, l * k + q % k)]);
                            let prior_train = DVector::from_fn(r * k, |q, _| dynamics.mean_dynamics[l * k + q % k]);
                            let prior_test = DVector::from_fn(k, |c, _| dynamics.mean_dynamics[l * k + c]);
                            let pred = gp_predict(&kt, &kc, &kss, &post, &prior_train, &prior_test, &lik)?;
                            mean.rows_mut(l * k, k).copy_from(&pred.mean);
                            cov.view_mut((l * k, l * k), (k, k)).copy_from(&pred.cov);
                        }
                    }
                    let a = unvec_row_major(mean.as_slice(), k, k)?;
                    let shared = SharedParams::new(a, dynamics.input_mean.clone(), params.loading.clone(), params.offset.clone())?;
                    Ok(TrialPrediction {
                        trial_id: id,
                        params: shared,
                        modulator: DVector::zeros(k),
                        belief: GaussianBelief { mean, cov },
                    })
                })
                .collect()
        }
    }
}

/// Sampled activity of predicted held-out trials.
#[derive(Debug, Clone)]
pub struct HeldoutPrediction {
    pub trial_ids: Vec<u32>,
    /// Held-out trials x neurons, spikes per second averaged over bins and samples.
    pub mean_rates: DMatrix<f64>,
    /// Model mean rate `E[exp(z)]` from lognormal moments, same layout.
    pub expected_rates: DMatrix<f64>,
    /// Sample-averaged group correlation per held-out trial.
    pub group_correlations: Vec<f64>,
    /// Per held-out trial, `S x T x p` counts.
    pub samples: Vec<Vec<u32>>,
}

/// Lognormal mean rates of a PLDS trial started at `x₀ ~ N(0, I)`, per bin (`T x p`).
pub fn expected_counts(params: &SharedParams, modulator: &DVector<f64>, stimulus: &DMatrix<f64>) -> DMatrix<f64> {
    let k = params.latent_dim();
    let p = params.num_neurons();
    let t_len = stimulus.nrows();
    let eye = DMatrix::identity(k, k);
    let mut mean = DVector::zeros(k);
    let mut cov = eye.clone();
    let mut out = DMatrix::zeros(t_len, p);
    for t in 0..t_len {
        mean = &params.dynamics * mean + &params.input_map * stimulus.row(t).transpose();
        cov = &params.dynamics * cov * params.dynamics.transpose() + &eye;
        for j in 0..p {
            let c = params.loading.row(j);
            let m = c.dot(&(&mean + modulator).transpose()) + params.offset[j];
            let v = (c * &cov).dot(&c);
            out[(t, j)] = (m + 0.5 * v).exp();
        }
    }
    out
}

/// Predicts held-out trials and draws `num_samples` spike trains for each.
///
/// `stimuli[n]` is the stimulus of `test_ids[n]`. Sample `s` of trial `id` uses
/// the stream `derive_seed(derive_seed(seed, PREDICTION, id), 0, s)`.
#[allow(clippy::too_many_arguments)]
pub fn predict_heldout(
    params: &ParamPosterior,
    hyper: &Hyperparams,
    train_ids: &[u32],
    test_ids: &[u32],
    stimuli: &[DMatrix<f64>],
    groups: &[usize],
    num_samples: usize,
    bin_width: f64,
    seed: u64,
) -> Result<HeldoutPrediction> {
    ensure_shape!(stimuli.len() == test_ids.len(), "one stimulus per held-out trial required");
    if num_samples == 0 {
        return Err(Error::Domain("at least one sample is required".into()));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Domain("bin width must be positive".into()));
    }
    let preds = predict_trial_params(params, hyper, train_ids, test_ids)?;
    let p = params.loading.nrows();
    let per_trial = preds
        .par_iter()
        .zip(stimuli.par_iter())
        .map(|(pred, u)| {
            let trial_seed = derive_seed(seed, streams::PREDICTION, pred.trial_id as u64);
            let t_len = u.nrows();
            let mut counts = Vec::with_capacity(num_samples * t_len * p);
            let mut rate = DVector::zeros(p);
            let mut corr = 0.0;
            for s in 0..num_samples {
                let sample = sample_plds_trial(&pred.params, &pred.modulator, u, derive_seed(trial_seed, 0, s as u64))?;
                let m = DMatrix::from_row_iterator(t_len, p, sample.counts.iter().map(|&y| y as f64));
                rate += m.row_mean().transpose();
                if !groups.is_empty() {
                    corr += group_correlation(&m, groups)?.value;
                }
                counts.extend_from_slice(&sample.counts);
            }
            let expected = expected_counts(&pred.params, &pred.modulator, u).row_mean().transpose() / bin_width;
            Ok((rate / (num_samples as f64 * bin_width), expected, corr / num_samples as f64, counts))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = test_ids.len();
    let mut mean_rates = DMatrix::zeros(n, p);
    let mut expected_rates = DMatrix::zeros(n, p);
    let mut group_correlations = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for (i, (rate, expected, corr, counts)) in per_trial.into_iter().enumerate() {
        mean_rates.set_row(i, &rate.transpose());
        expected_rates.set_row(i, &expected.transpose());
        group_correlations.push(corr);
        samples.push(counts);
    }
    Ok(HeldoutPrediction {
        trial_ids: test_ids.to_vec(),
        mean_rates,
        expected_rates,
        group_correlations,
        samples,
    })
}

/// Per-neuron mean firing rate (spikes per second) of each trial, trials x neurons.
pub fn empirical_rates(dataset: &SpikeDataset) -> DMatrix<f64> {
    let trials = dataset_trials(dataset);
    let mut out = DMatrix::zeros(trials.len(), dataset.num_neurons());
    for (i, m) in trials.iter().enumerate() {
        out.set_row(i, &(m.row_mean() / dataset.bin_width));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_trials(seed: u64, r: usize, t_len: usize, p: usize, trial_sd: f64) -> Vec<DMatrix<f64>> {
        let mut rng = rng_from(seed);
        (0..r)
            .map(|_| {
                let shift: f64 = trial_sd * rng.sample::<f64, _>(StandardNormal);
                DMatrix::from_fn(t_len, p, |_, _| shift + rng.sample::<f64, _>(StandardNormal))
            })
            .collect()
    }

    #[test]
    fn identical_trial_means_give_equal_total_and_conditional() {
        let trials = gaussian_trials(1, 50, 400, 4, 0.0);
        let s = total_and_conditional_covariance(&trials, None).unwrap();
        assert!((s.raw_total - s.raw_conditional).abs() < 0.01);
    }

    #[test]
    fn shared_trial_shift_inflates_total() {
        let trials = gaussian_trials(2, 50, 200, 4, 1.5);
        let s = total_and_conditional_covariance(&trials, None).unwrap();
        assert!(s.total > 5.0 * s.conditional.abs().max(0.01), "{} vs {}", s.total, s.conditional);
        assert_eq!(s.total, 1.0);
    }

    #[test]
    fn law_of_total_covariance() {
        let trials = gaussian_trials(3, 40, 100, 3, 1.0);
        let s = total_and_conditional_covariance(&trials, None).unwrap();
        let means: Vec<DMatrix<f64>> = trials.iter().map(|m| DMatrix::from_row_slice(1, 3, m.row_mean().as_slice())).collect();
        let stacked = DMatrix::from_fn(means.len(), 3, |i, j| means[i][(0, j)]);
        let between = covariance(&stacked);
        // with population estimates and equal trial lengths the identity is exact
        let recon = &s.conditional_pairs + between;
        assert!((recon - &s.total_pairs).amax() < 1e-10);
    }

    #[test]
    fn zero_variance_neuron_is_excluded() {
        let mut trials = gaussian_trials(4, 5, 20, 3, 0.5);
        for m in trials.iter_mut() {
            m.column_mut(2).fill(1.0);
        }
        let s = total_and_conditional_covariance(&trials, None).unwrap();
        assert_eq!(s.excluded, vec![2]);
    }

    #[test]
    fn reference_normalization() {
        let trials = gaussian_trials(5, 10, 50, 3, 1.0);
        let s = total_and_conditional_covariance(&trials, Some(2.0)).unwrap();
        assert!((s.total - s.raw_total / 2.0).abs() < 1e-15);
    }

    #[test]
    fn anti_phase_groups() {
        let m = DMatrix::from_fn(10, 4, |t, j| if (t % 2 == 0) == (j < 2) { 3.0 } else { 0.0 });
        let c = group_correlation(&m, &[0, 0, 1, 1]).unwrap();
        assert!((c.value + 1.0).abs() < 1e-12);
        assert!(!c.constant);
    }

    #[test]
    fn constant_group_is_flagged() {
        let m = DMatrix::from_fn(10, 2, |t, j| if j == 0 { 1.0 } else { t as f64 });
        let c = group_correlation(&m, &[0, 1]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.constant);
    }

    #[test]
    fn independent_groups_are_uncorrelated() {
        let mut rng = rng_from(6);
        let t_len = 400;
        let mut outside = 0;
        for _ in 0..100 {
            let m = DMatrix::from_fn(t_len, 6, |_, _| rng.random_range(0..5) as f64);
            let c = group_correlation(&m, &[0, 0, 0, 1, 1, 1]).unwrap().value;
            if c.abs() > 3.0 / (t_len as f64).sqrt() {
                outside += 1;
            }
        }
        assert!(outside <= 2, "{outside}");
    }

    #[test]
    fn rmse_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.535_533_905_932_737_6).abs() < 1e-12);
        assert!((rmse(&[1.5, -2.0, 7.0], &[1.0, -2.5, 6.5]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(rmse(&[], &[]), Err(Error::Domain(_))));
        assert!(matches!(rmse(&[1.0], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn implied_correlation_of_block_loading_is_latent_correlation() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, -1.2, -1.2, 3.0]);
        let loading = DMatrix::from_row_slice(4, 2, &[0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5]);
        let c = implied_group_correlation(&cov, &loading, &[0, 0, 1, 1]).unwrap();
        assert!((c - (-1.2 / 6f64.sqrt())).abs() < 1e-12);
        // any invertible change of latent coordinates leaves it unchanged
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.7, 2.0]);
        let c2 = implied_group_correlation(&(&m * &cov * m.transpose()), &(&loading * m.try_inverse().unwrap()), &[0, 0, 1, 1]).unwrap();
        assert!((c - c2).abs() < 1e-12);
    }

    #[test]
    fn unstable_dynamics_use_trial_average() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let cov = implied_latent_covariance(&a, 3).unwrap();
        // marginals 2, 3, 4
        assert!((cov[(0, 0)] - 3.0).abs() < 1e-12);
    }
}
