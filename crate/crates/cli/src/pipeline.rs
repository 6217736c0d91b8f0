//! The five commands. Each reads and writes the on-disk formats of [`crate::io`]
//! and finishes by writing a run manifest into its output directory.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nplds::baselines::{fit_fixed_plds, fit_independent_plds, TrialFailure};
use nplds::evaluation::{
    dataset_trials, empirical_rates, group_correlation, implied_group_correlation, implied_latent_covariance, pearson,
    predict_heldout, rmse, sampled_log_rates, total_and_conditional_covariance, trial_point_params, CovarianceSummary,
};
use nplds::vbem::{self, default_hyper, FitConfig, FitDiagnostics, FitResult, ParamPosterior};
use nplds::{Hyperparams, SharedParams, SpikeDataset};
use serde::{Deserialize, Serialize};

use crate::error::{exit, CliError, CliResult, Stage};
use crate::io::{
    decode_f64, encode_f64, num, read_bytes, read_dataset, read_json, read_truth, write_dataset, write_truth, GroundTruth,
    LoadedDataset, OutputDir, Table, TrueModel, COUNTS_FILE, DATASET_MANIFEST, SCHEMA_VERSION, STIMULUS_FILE,
    TRUE_LOG_RATES_FILE, TRUTH_FILE,
};
use crate::presets::{self, ModelVariant, Preset, Threshold};

pub const MODEL_FILE: &str = "model.json";
pub const MODEL_FORMAT: &str = "nplds-model";
pub const LATENT_MEANS_FILE: &str = "latent_means.bin";
pub const LATENT_VARIANCES_FILE: &str = "latent_variances.bin";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const DEFAULT_SAMPLES: usize = 100;

/// One fitted model and the trials it was fit on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub trial_ids: Vec<u32>,
    pub params: ParamPosterior,
    pub hyper: Hyperparams,
    pub diagnostics: FitDiagnostics,
}

/// Contents of `model.json`. Independent fits hold one record per trial, all
/// other variants a single record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub schema_version: u32,
    pub variant: ModelVariant,
    /// Hash of the manifest of the dataset the model was fit to.
    pub dataset_sha256: String,
    pub heldout_trial_ids: Vec<u32>,
    pub config: FitConfig,
    pub fits: Vec<FitRecord>,
    pub failures: Vec<TrialFailure>,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub variant: ModelVariant,
    /// Required unless the dataset came from a preset.
    pub latent_dim: Option<usize>,
    pub holdout_every: Option<usize>,
    pub sigma2: Option<f64>,
    pub tau2: Option<f64>,
    pub eps: Option<f64>,
    pub max_iters: Option<usize>,
    pub convergence_window: Option<usize>,
    /// Start from and keep the true `C`, `d` stored next to the dataset.
    pub loading_from_truth: bool,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(variant: ModelVariant, seed: u64) -> Self {
        Self {
            variant,
            latent_dim: None,
            holdout_every: None,
            sigma2: None,
            tau2: None,
            eps: None,
            max_iters: None,
            convergence_window: None,
            loading_from_truth: false,
            seed,
        }
    }
}

fn schema(stage: &'static str) -> impl Fn(nplds::Error) -> CliError {
    move |e| CliError::schema(stage, e.to_string())
}

fn load_model(dir: &Path) -> CliResult<ModelFile> {
    let model: ModelFile = read_json(&dir.join(MODEL_FILE)).stage("load")?;
    if model.format != MODEL_FORMAT || model.schema_version != SCHEMA_VERSION {
        return Err(CliError::schema(
            "load",
            format!("{}: expected {MODEL_FORMAT} schema {SCHEMA_VERSION}", dir.join(MODEL_FILE).display()),
        ));
    }
    if model.fits.is_empty() {
        return Err(CliError::schema("load", "model file holds no fits"));
    }
    Ok(model)
}

/// Loads a dataset and a model and checks that the model was fit to it.
fn load_matching(data: &Path, model_dir: &Path) -> CliResult<(LoadedDataset, ModelFile)> {
    let loaded = read_dataset(data).stage("load")?;
    let model = load_model(model_dir)?;
    if model.dataset_sha256 != loaded.manifest_sha256 {
        return Err(CliError::new(
            exit::MANIFEST,
            "load",
            format!("model was fit to dataset {} but {} has {}", model.dataset_sha256, data.display(), loaded.manifest_sha256),
        ));
    }
    Ok((loaded, model))
}

fn positions_of(ds: &SpikeDataset, ids: &[u32]) -> CliResult<Vec<usize>> {
    ids.iter()
        .map(|id| {
            ds.trial_ids()
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| CliError::schema("load", format!("trial id {id} is not in the dataset")))
        })
        .collect()
}

fn inputs(entries: &[(&str, &str)]) -> BTreeMap<String, String> {
    entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[derive(Serialize)]
struct SimulateConfig {
    preset: Preset,
}

/// Writes the dataset, its ground truth and a run manifest to `out`.
pub fn simulate(preset: Preset, seed: u64, out: &Path) -> CliResult<String> {
    let sim = presets::simulate(preset, seed).stage("simulate")?;
    let mut dir = OutputDir::create(out).stage("simulate")?;
    let manifest_sha = write_dataset(out, &sim.dataset, Some(preset.name()), Some(seed)).stage("simulate")?;
    write_truth(out, &sim.truth, &sim.log_rates).stage("simulate")?;
    for name in [DATASET_MANIFEST, COUNTS_FILE, STIMULUS_FILE, TRUTH_FILE, TRUE_LOG_RATES_FILE] {
        dir.record(name).stage("simulate")?;
    }
    dir.finish("simulate", seed, &SimulateConfig { preset }, BTreeMap::new()).stage("simulate")?;
    Ok(manifest_sha)
}

fn resolve_config(loaded: &LoadedDataset, train: &SpikeDataset, data: &Path, opts: &FitOptions) -> CliResult<FitConfig> {
    let preset = loaded.manifest.preset.as_deref().and_then(Preset::from_name);
    let mut cfg = match (preset, opts.latent_dim) {
        (Some(p), k) => {
            let mut cfg = presets::fit_config(p, opts.variant, opts.seed);
            if let Some(k) = k {
                cfg.latent_dim = k;
            }
            cfg
        }
        (None, Some(k)) => {
            let mut cfg = FitConfig::new(opts.variant.engine_variant(), k);
            cfg.seed = opts.seed;
            cfg
        }
        (None, None) => return Err(CliError::schema("config", "--k is required for datasets without a preset")),
    };
    if opts.sigma2.is_some() || opts.tau2.is_some() || opts.eps.is_some() {
        let mut h = cfg.initial_hyper.clone().unwrap_or_else(|| default_hyper(train.num_trials()));
        h.sigma2 = opts.sigma2.unwrap_or(h.sigma2);
        h.tau2 = opts.tau2.unwrap_or(h.tau2);
        h.eps = opts.eps.unwrap_or(h.eps);
        cfg.initial_hyper = Some(h);
    }
    if let Some(n) = opts.max_iters {
        cfg.max_iters = n;
    }
    if let Some(n) = opts.convergence_window {
        cfg.convergence_window = n;
    }
    cfg.validate().map_err(schema("config"))?;
    if opts.loading_from_truth {
        let (truth, _) = read_truth(data, train.num_bins(), train.num_neurons())
            .stage("config")?
            .ok_or_else(|| CliError::schema("config", format!("{} has no ground truth", data.display())))?;
        let start = presets::truth_loading_start(&truth, train.num_trials(), train.input_dim());
        if start.loading.shape() != (train.num_neurons(), cfg.latent_dim) {
            return Err(CliError::schema("config", "true loading does not match the latent dimension"));
        }
        cfg.initial_params = Some(start);
        cfg.fix_loading = true;
    }
    Ok(cfg)
}

fn record(fit: FitResult) -> (FitRecord, Vec<nplds::vbem::TrialLatents>) {
    (
        FitRecord {
            trial_ids: fit.trial_ids,
            params: fit.params,
            hyper: fit.hyper,
            diagnostics: fit.diagnostics,
        },
        fit.latents,
    )
}

/// Fits one model variant and writes `model.json`, the per-iteration
/// diagnostics and the latent posterior means and variances.
pub fn fit(data: &Path, out: &Path, opts: &FitOptions) -> CliResult<String> {
    let loaded = read_dataset(data).stage("load")?;
    let ds = &loaded.dataset;
    let r = ds.num_trials();
    let (train_pos, heldout_pos): (Vec<usize>, Vec<usize>) = match opts.holdout_every {
        None => ((0..r).collect(), vec![]),
        Some(n) if n < 2 => return Err(CliError::schema("config", "--holdout-every must be at least 2")),
        Some(n) => (0..r).partition(|i| i % n != n - 1),
    };
    let train = ds.select_trials(&train_pos).stage("load")?;
    let heldout_trial_ids: Vec<u32> = heldout_pos.iter().map(|&i| ds.trial_ids()[i]).collect();
    let cfg = resolve_config(&loaded, &train, data, opts)?;

    let (records, failures) = match opts.variant {
        ModelVariant::Model1 | ModelVariant::Model2 => (vec![record(vbem::fit(&train, &cfg).stage("fit")?)], vec![]),
        ModelVariant::PldsFixed => (vec![record(fit_fixed_plds(&train, &cfg).stage("fit")?)], vec![]),
        ModelVariant::PldsIndependent => {
            let ind = fit_independent_plds(&train, &cfg).stage("fit")?;
            if ind.num_succeeded() == 0 {
                return Err(CliError::new(exit::FIT, "fit", "every independent trial fit failed"));
            }
            (ind.fits.into_iter().flatten().map(record).collect::<Vec<_>>(), ind.failures)
        }
    };

    let mut diag = Table::new(&["fit", "iteration", "score", "sigma2", "tau2"]);
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for (n, (rec, latents)) in records.iter().enumerate() {
        let d = &rec.diagnostics;
        let opt = |v: Option<f64>| v.map_or("NA".to_owned(), num);
        diag.push(vec![n.to_string(), "0".into(), opt(d.initial_score), "NA".into(), "NA".into()]);
        for it in &d.iterations {
            diag.push(vec![n.to_string(), it.iteration.to_string(), opt(it.score), num(it.sigma2), num(it.tau2)]);
        }
        for lat in latents {
            for t in 1..lat.means.len() {
                means.extend(lat.means[t].iter().copied());
                variances.extend(lat.covs[t].diagonal().iter().copied());
            }
        }
    }
    let model = ModelFile {
        format: MODEL_FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        variant: opts.variant,
        dataset_sha256: loaded.manifest_sha256.clone(),
        heldout_trial_ids,
        config: cfg.clone(),
        fits: records.into_iter().map(|(rec, _)| rec).collect(),
        failures,
    };
    let mut dir = OutputDir::create(out).stage("fit")?;
    dir.write_json(MODEL_FILE, &model).stage("fit")?;
    dir.write_table("diagnostics.tsv", &diag).stage("fit")?;
    dir.write(LATENT_MEANS_FILE, &encode_f64(means)).stage("fit")?;
    dir.write(LATENT_VARIANCES_FILE, &encode_f64(variances)).stage("fit")?;
    dir.finish("fit", opts.seed, &(opts.variant, &cfg), inputs(&[("dataset", &loaded.manifest_sha256)]))
        .stage("fit")
}

fn load_truth(data: &Path, ds: &SpikeDataset) -> CliResult<Option<(GroundTruth, Vec<DMatrix<f64>>)>> {
    let truth = read_truth(data, ds.num_bins(), ds.num_neurons()).stage("load")?;
    if let Some((_, z)) = &truth {
        if z.len() != ds.num_trials() {
            return Err(CliError::schema("load", "true log rates do not match the number of trials"));
        }
    }
    Ok(truth)
}

/// Predicts the held-out trials of a model fit with `--holdout-every` and
/// compares their sampled mean rates with the recorded ones.
pub fn predict(data: &Path, model_dir: &Path, out: &Path, num_samples: usize, seed: u64) -> CliResult<String> {
    let (loaded, model) = load_matching(data, model_dir)?;
    let ds = &loaded.dataset;
    if model.variant == ModelVariant::PldsIndependent {
        return Err(CliError::schema("predict", "independent per-trial fits cannot predict unseen trials"));
    }
    if model.heldout_trial_ids.is_empty() {
        return Err(CliError::schema("predict", "model has no held-out trials; fit with --holdout-every"));
    }
    let fit = &model.fits[0];
    let test_pos = positions_of(ds, &model.heldout_trial_ids)?;
    let test = ds.select_trials(&test_pos).stage("predict")?;
    let stimuli: Vec<_> = (0..test.num_trials()).map(|i| test.trial_stimulus(i)).collect();
    let groups = load_truth(data, ds)?.map(|(t, _)| t.groups).unwrap_or_default();
    let pred = predict_heldout(
        &fit.params,
        &fit.hyper,
        &fit.trial_ids,
        test.trial_ids(),
        &stimuli,
        &groups,
        num_samples,
        ds.bin_width,
        seed,
    )
    .stage("predict")?;
    let empirical = empirical_rates(&test);

    let mut rates = Table::new(&["trial_id", "neuron", "sampled_rate", "expected_rate", "empirical_rate"]);
    for (n, id) in pred.trial_ids.iter().enumerate() {
        for j in 0..empirical.ncols() {
            rates.push(vec![
                id.to_string(),
                j.to_string(),
                num(pred.mean_rates[(n, j)]),
                num(pred.expected_rates[(n, j)]),
                num(empirical[(n, j)]),
            ]);
        }
    }
    let flat = |m: &DMatrix<f64>| m.iter().copied().collect::<Vec<_>>();
    let mut metrics = Table::new(&["metric", "value"]);
    metrics.push(vec!["rate_rmse".into(), num(rmse(&flat(&pred.mean_rates), &flat(&empirical)).stage("predict")?)]);
    metrics.push(vec![
        "expected_rate_rmse".into(),
        num(rmse(&flat(&pred.expected_rates), &flat(&empirical)).stage("predict")?),
    ]);

    let mut dir = OutputDir::create(out).stage("predict")?;
    dir.write_table("predictions.tsv", &rates).stage("predict")?;
    if !groups.is_empty() {
        let mut corr = Table::new(&["trial_id", "group_correlation"]);
        for (id, c) in pred.trial_ids.iter().zip(&pred.group_correlations) {
            corr.push(vec![id.to_string(), num(*c)]);
        }
        dir.write_table("group_correlations.tsv", &corr).stage("predict")?;
    }
    dir.write_table(METRICS_FILE, &metrics).stage("predict")?;
    let model_sha = crate::io::sha256_hex(&read_bytes(&model_dir.join(MODEL_FILE)).stage("predict")?);
    dir.finish(
        "predict",
        seed,
        &num_samples,
        inputs(&[("dataset", &loaded.manifest_sha256), ("model", &model_sha)]),
    )
    .stage("predict")
}

/// Point parameters and modulator of every fitted trial, in model-file order.
fn fitted_trials(model: &ModelFile) -> CliResult<Vec<(u32, SharedParams, DVector<f64>)>> {
    let mut out = Vec::new();
    for rec in &model.fits {
        let per_trial = trial_point_params(&rec.params).stage("evaluate")?;
        if per_trial.len() != rec.trial_ids.len() {
            return Err(CliError::schema("evaluate", "fit record trial count does not match its parameters"));
        }
        out.extend(rec.trial_ids.iter().zip(per_trial).map(|(&id, (p, h))| (id, p, h)));
    }
    Ok(out)
}

fn covariance_row(table: &mut Table, source: &str, c: &CovarianceSummary) {
    table.push(vec![
        source.into(),
        num(c.total),
        num(c.conditional),
        num(c.raw_total),
        num(c.raw_conditional),
        num(c.ratio()),
    ]);
}

/// Compares a fitted model against the ground truth stored with its dataset.
///
/// For the correlation sweep the per-trial group correlation implied by the
/// fitted dynamics is compared with the true one. For the modulation
/// experiment the posterior-mean log rates are compared with the true log
/// rates, and total and conditional covariances of log rates are reported for
/// the truth, for one draw from the fitted model and for the posterior means.
pub fn evaluate(data: &Path, model_dir: &Path, out: &Path, seed: u64) -> CliResult<String> {
    let (loaded, model) = load_matching(data, model_dir)?;
    let ds = &loaded.dataset;
    let (truth, true_z) = load_truth(data, ds)?
        .ok_or_else(|| CliError::schema("evaluate", format!("{} has no ground truth", data.display())))?;
    let trials = fitted_trials(&model)?;
    let ids: Vec<u32> = trials.iter().map(|t| t.0).collect();
    let pos = positions_of(ds, &ids)?;
    let t_len = ds.num_bins();
    let groups = &truth.groups;
    let mut metrics = Table::new(&["metric", "value"]);
    let mut dir = OutputDir::create(out).stage("evaluate")?;

    if let Some(true_corr) = &truth.correlations {
        let mut model_corr = Vec::with_capacity(trials.len());
        for (_, p, _) in &trials {
            let cov = implied_latent_covariance(&p.dynamics, t_len).stage("evaluate")?;
            model_corr.push(implied_group_correlation(&cov, &p.loading, groups).stage("evaluate")?);
        }
        let counts = dataset_trials(ds);
        let mut table = Table::new(&["trial_id", "true", "model", "empirical"]);
        let mut truth_at = Vec::with_capacity(pos.len());
        let mut empirical = Vec::with_capacity(pos.len());
        for (n, &i) in pos.iter().enumerate() {
            let e = group_correlation(&counts[i], groups).stage("evaluate")?.value;
            truth_at.push(true_corr[i]);
            empirical.push(e);
            table.push(vec![ids[n].to_string(), num(true_corr[i]), num(model_corr[n]), num(e)]);
        }
        metrics.push(vec!["correlation_rmse".into(), num(rmse(&model_corr, &truth_at).stage("evaluate")?)]);
        metrics.push(vec!["empirical_correlation_rmse".into(), num(rmse(&empirical, &truth_at).stage("evaluate")?)]);
        dir.write_table("correlations.tsv", &table).stage("evaluate")?;
    }

    if let TrueModel::Model1(_) = &truth.model {
        let k = trials[0].1.latent_dim();
        let means_path = model_dir.join(LATENT_MEANS_FILE);
        let means = decode_f64(&read_bytes(&means_path).stage("evaluate")?, &means_path).stage("evaluate")?;
        if means.len() != trials.len() * t_len * k {
            return Err(CliError::schema("evaluate", format!("{} does not match the fitted trials", means_path.display())));
        }
        let posterior_z: Vec<DMatrix<f64>> = trials
            .iter()
            .zip(means.chunks_exact(t_len * k))
            .map(|((_, p, h), m)| {
                let m = DMatrix::from_row_slice(t_len, k, m);
                let mut z = DMatrix::zeros(t_len, p.num_neurons());
                for t in 0..t_len {
                    let row = &p.loading * (m.row(t).transpose() + h) + &p.offset;
                    z.set_row(t, &row.transpose());
                }
                z
            })
            .collect();
        let true_sel: Vec<DMatrix<f64>> = pos.iter().map(|&i| true_z[i].clone()).collect();
        let num_groups = groups.iter().max().map_or(0, |g| g + 1);
        for g in 0..num_groups {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (zp, zt) in posterior_z.iter().zip(&true_sel) {
                for t in 0..t_len {
                    for (j, _) in groups.iter().enumerate().filter(|(_, &gj)| gj == g) {
                        a.push(zp[(t, j)]);
                        b.push(zt[(t, j)]);
                    }
                }
            }
            let r = pearson(&a, &b).unwrap_or(f64::NAN);
            metrics.push(vec![format!("z_correlation_group{g}"), num(r)]);
        }

        let stimuli: Vec<_> = pos.iter().map(|&i| ds.trial_stimulus(i)).collect();
        let point: Vec<(SharedParams, DVector<f64>)> = trials.iter().map(|(_, p, h)| (p.clone(), h.clone())).collect();
        let sampled = sampled_log_rates(&point, &stimuli, seed).stage("evaluate")?;
        let true_cov = total_and_conditional_covariance(&true_sel, None).stage("evaluate")?;
        let reference = Some(true_cov.raw_total);
        let model_cov = total_and_conditional_covariance(&sampled, reference).stage("evaluate")?;
        let post_cov = total_and_conditional_covariance(&posterior_z, reference).stage("evaluate")?;
        let mut cov = Table::new(&["source", "total", "conditional", "raw_total", "raw_conditional", "ratio"]);
        for (name, c) in [("true", &true_cov), ("model", &model_cov), ("posterior_mean", &post_cov)] {
            covariance_row(&mut cov, name, c);
            metrics.push(vec![format!("{name}_total"), num(c.total)]);
            metrics.push(vec![format!("{name}_conditional"), num(c.conditional)]);
            metrics.push(vec![format!("{name}_raw_conditional"), num(c.raw_conditional)]);
            metrics.push(vec![format!("{name}_ratio"), num(c.ratio())]);
        }
        metrics.push(vec!["ratio_error".into(), num((model_cov.ratio() - true_cov.ratio()).abs())]);
        dir.write_table("covariance.tsv", &cov).stage("evaluate")?;
    }

    dir.write_table(METRICS_FILE, &metrics).stage("evaluate")?;
    let model_sha = crate::io::sha256_hex(&read_bytes(&model_dir.join(MODEL_FILE)).stage("evaluate")?);
    dir.finish("evaluate", seed, &(), inputs(&[("dataset", &loaded.manifest_sha256), ("model", &model_sha)]))
        .stage("evaluate")
}

/// One line of the reproduction summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `None` for values reported without a threshold.
    pub threshold: Option<Threshold>,
}

impl Check {
    pub fn status(&self) -> &'static str {
        match self.threshold {
            None => "info",
            Some(t) if t.passes(self.value) => "pass",
            Some(_) => "fail",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status() != "fail")
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["check", "value", "threshold", "status"]);
        for c in &self.checks {
            let threshold = c.threshold.map_or("-".to_owned(), Threshold::describe);
            t.push(vec![c.name.clone(), num(c.value), threshold, c.status().into()]);
        }
        t
    }
}

fn metric(dir: &Path, name: &str) -> CliResult<f64> {
    let table = Table::read(&dir.join(METRICS_FILE)).stage("summary")?;
    let v = table.lookup("metric", name, "value").stage("summary")?;
    v.parse().map_err(|_| CliError::schema("summary", format!("{name} = {v} is not a number")))
}

fn check(name: impl Into<String>, value: f64, threshold: Option<Threshold>) -> Check {
    Check {
        name: name.into(),
        value,
        threshold,
    }
}

/// Runs simulate, the three fits, evaluation and held-out prediction for a
/// preset, then writes `summary.tsv` comparing the results with the pass
/// thresholds. Outputs go to subdirectories of `out`.
pub fn reproduce(preset: Preset, seed: u64, out: &Path) -> CliResult<Summary> {
    let data = out.join("data");
    let dataset_sha = simulate(preset, seed, &data)?;
    let nplds = preset.nplds_variant();
    let variants = [nplds, ModelVariant::PldsFixed, ModelVariant::PldsIndependent];
    for v in variants {
        log::info!("{}: fitting {}", preset.name(), v.name());
        let mut opts = FitOptions::new(v, seed);
        opts.loading_from_truth = preset.fixes_loading();
        let fit_dir = out.join(format!("fit-{}", v.name()));
        fit(&data, &fit_dir, &opts)?;
        evaluate(&data, &fit_dir, &out.join(format!("eval-{}", v.name())), seed)?;
    }
    for v in [nplds, ModelVariant::PldsFixed] {
        log::info!("{}: held-out prediction with {}", preset.name(), v.name());
        let mut opts = FitOptions::new(v, seed);
        opts.loading_from_truth = preset.fixes_loading();
        opts.holdout_every = Some(presets::HOLDOUT_EVERY);
        let train_dir = out.join(format!("train-{}", v.name()));
        fit(&data, &train_dir, &opts)?;
        predict(&data, &train_dir, &out.join(format!("predict-{}", v.name())), DEFAULT_SAMPLES, seed)?;
    }

    let eval = |v: ModelVariant| out.join(format!("eval-{}", v.name()));
    let mut checks = Vec::new();
    match preset {
        Preset::Fig3 => {
            let m = metric(&eval(nplds), "correlation_rmse")?;
            let ind = metric(&eval(ModelVariant::PldsIndependent), "correlation_rmse")?;
            let fixed = metric(&eval(ModelVariant::PldsFixed), "correlation_rmse")?;
            let (lo, hi) = presets::FIG3_INDEPENDENT_RMSE;
            checks.push(check("correlation_rmse_model2", m, Some(Threshold::AtMost(presets::FIG3_NPLDS_MAX_RMSE))));
            checks.push(check("correlation_rmse_plds_independent", ind, Some(Threshold::Within(lo, hi))));
            checks.push(check("correlation_rmse_plds_fixed", fixed, Some(Threshold::AtLeast(presets::FIG3_FIXED_MIN_RMSE))));
            let ordered = m <= ind && ind < fixed;
            checks.push(check("rmse_order_nplds_independent_fixed", if ordered { 1.0 } else { 0.0 }, None));
            checks.push(check("empirical_correlation_rmse", metric(&eval(nplds), "empirical_correlation_rmse")?, None));
        }
        Preset::Fig2 => {
            let e = eval(nplds);
            for g in 0..2 {
                let name = format!("z_correlation_group{g}");
                checks.push(check(name.clone(), metric(&e, &name)?, Some(Threshold::AtLeast(presets::FIG2_MIN_Z_CORRELATION))));
            }
            checks.push(check("covariance_ratio_error", metric(&e, "ratio_error")?, Some(Threshold::AtMost(presets::FIG2_MAX_RATIO_ERROR))));
            let fixed = eval(ModelVariant::PldsFixed);
            let excess = metric(&fixed, "model_raw_conditional")? - metric(&fixed, "true_raw_conditional")?;
            checks.push(check("fixed_conditional_excess", excess, Some(Threshold::Above(0.0))));
            checks.push(check("true_total", metric(&e, "true_total")?, None));
            checks.push(check("true_conditional", metric(&e, "true_conditional")?, None));
            checks.push(check("true_ratio", metric(&e, "true_ratio")?, None));
            for v in variants {
                let d = eval(v);
                for m in ["total", "conditional", "ratio"] {
                    checks.push(check(format!("{}_{m}", v.name()), metric(&d, &format!("model_{m}"))?, None));
                }
            }
        }
    }
    for v in [nplds, ModelVariant::PldsFixed] {
        let d = out.join(format!("predict-{}", v.name()));
        checks.push(check(format!("heldout_rate_rmse_{}", v.name()), metric(&d, "rate_rmse")?, None));
    }

    let summary = Summary { checks };
    let mut dir = OutputDir::create(out).stage("summary")?;
    dir.write_table(SUMMARY_FILE, &summary.table()).stage("summary")?;
    dir.finish("reproduce", seed, &SimulateConfig { preset }, inputs(&[("dataset", &dataset_sha)]))
        .stage("summary")?;
    Ok(summary)
}
