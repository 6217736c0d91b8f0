use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nplds_cli::error::{exit, CliError, CliResult};
use nplds_cli::pipeline::{self, FitOptions, DEFAULT_SAMPLES};
use nplds_cli::presets::{ModelVariant, Preset};

#[derive(Parser)]
#[command(name = "nplds", version, about = "Non-stationary Poisson latent dynamical systems")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one of the two experiments and write the dataset and its ground truth.
    Simulate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Predict the held-out trials of a model fit with --holdout-every.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a fitted model with the ground truth of a simulated dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment end to end and check the results against the pass thresholds.
    Reproduce {
        #[arg(value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    variant: ModelVariant,
    /// Latent dimension; defaults to the preset's.
    #[arg(long)]
    k: Option<usize>,
    /// Hold out every Nth trial for prediction.
    #[arg(long)]
    holdout_every: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    convergence_window: Option<usize>,
    /// Use and keep the true loading and offset stored with the dataset.
    #[arg(long)]
    loading_from_truth: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> CliResult<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::schema("config", e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { preset, seed, out } => {
            pipeline::simulate(preset, seed, &out)?;
        }
        Command::Fit(a) => {
            let opts = FitOptions {
                variant: a.variant,
                latent_dim: a.k,
                holdout_every: a.holdout_every,
                sigma2: a.sigma2,
                tau2: a.tau2,
                eps: a.eps,
                max_iters: a.max_iters,
                convergence_window: a.convergence_window,
                loading_from_truth: a.loading_from_truth,
                seed: a.seed,
            };
            pipeline::fit(&a.data, &a.out, &opts)?;
        }
        Command::Predict { data, model, out, samples, seed } => {
            pipeline::predict(&data, &model, &out, samples, seed)?;
        }
        Command::Evaluate { data, model, out, seed } => {
            pipeline::evaluate(&data, &model, &out, seed)?;
        }
        Command::Reproduce { preset, seed, out } => {
            let summary = pipeline::reproduce(preset, seed, &out)?;
            print!("{}", summary.table().render());
            if !summary.passed() {
                return Ok(exit::THRESHOLD);
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
