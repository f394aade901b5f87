//! Command-line surface of the `crowdagg` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crowdagg::{FitOptions, SgdOptions};

#[derive(Debug, Parser)]
#[command(
    name = "crowdagg",
    version,
    about = "Aggregates sparse noisy continuous predictions into truth estimates"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Print every resolved option before running.
    #[arg(long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic benchmark instance and write an observation file.
    Synth(SynthArgs),
    /// Fit a noise model to an observation file.
    Fit(FitArgs),
    /// Estimate truths for new tasks from a trained model.
    Predict(PredictArgs),
    /// Score one method on a train/test split with withheld truths.
    Eval(EvalArgs),
    /// Run the benchmark grid and write per-cell scores as CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of tasks.
    #[arg(long, default_value_t = 1000)]
    pub tasks: usize,
    /// Number of workers.
    #[arg(long, default_value_t = 500)]
    pub workers: usize,
    /// Workers drawn per task, without replacement.
    #[arg(long = "per-task", default_value_t = 10)]
    pub per_task: usize,
    /// Mixing weight: 1 is purely independent noise, 0 purely low-rank.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Scale of the drawn truths.
    #[arg(long = "sigma-y", default_value_t = 1.0)]
    pub sigma_y: f64,
    /// Rank of the low-rank noise component.
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON generator config; when given it replaces all the flags above.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Append the drawn truths as a `# truth` section.
    #[arg(long = "with-truth")]
    pub with_truth: bool,
    /// Observation file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FitMethod {
    IndMl,
    IndVb,
    LatentMl,
    LatentVb,
    IcovFull,
}

impl FitMethod {
    pub fn name(self) -> &'static str {
        match self {
            FitMethod::IndMl => "ind_ml",
            FitMethod::IndVb => "ind_vb",
            FitMethod::LatentMl => "latent_ml",
            FitMethod::LatentVb => "latent_vb",
            FitMethod::IcovFull => "icov_full",
        }
    }
}

/// Convergence and initialization options shared by every fitter.
#[derive(Debug, Args)]
pub struct FitFlags {
    /// Sweep cap.
    #[arg(long = "max-iters", default_value_t = 500)]
    pub max_iters: usize,
    /// Relative-change convergence threshold.
    #[arg(long = "tol", default_value_t = 1e-8)]
    pub rel_tolerance: f64,
    /// Lower bound on every variance estimate.
    #[arg(long = "variance-floor", default_value_t = 1e-8)]
    pub variance_floor: f64,
    /// Seed for randomized initialization and ordering.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitFlags {
    pub fn to_options(&self) -> FitOptions {
        FitOptions {
            max_iters: self.max_iters,
            rel_tolerance: self.rel_tolerance,
            variance_floor: self.variance_floor,
            seed: self.seed,
        }
    }
}

/// Stochastic-gradient options; only the latent ML fit reads them.
#[derive(Debug, Args)]
pub struct SgdFlags {
    #[arg(long = "learning-rate", default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Tasks between refreshes of the truth estimates; omitted refreshes
    /// once per epoch.
    #[arg(long = "y-refresh")]
    pub y_refresh: Option<usize>,
}

impl SgdFlags {
    pub fn to_options(&self) -> SgdOptions {
        SgdOptions {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            y_refresh_period: self.y_refresh,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Observation file to fit.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub method: FitMethod,
    /// Latent rank; only the latent methods read it.
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    /// Model JSON to write.
    #[arg(long = "out-model")]
    pub out_model: PathBuf,
    /// Estimates CSV to write.
    #[arg(long = "out-estimates")]
    pub out_estimates: PathBuf,
    /// Posterior JSON to write; variational methods only.
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitFlags,
    #[command(flatten)]
    pub sgd: SgdFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PredictMode {
    /// One-shot posterior-mean formula from frozen worker factors.
    ClosedForm,
    /// Inverse-covariance weighting through the model covariance.
    Icov,
    /// Rerun the full variational fit with the new tasks included.
    Refit,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Trained model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Observation file with the new tasks.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub mode: PredictMode,
    /// Posterior JSON from the training fit; closed-form mode only.
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    /// Training observation file; refit mode only.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Estimates CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Training observation file.
    #[arg(long)]
    pub train: PathBuf,
    /// Test observation file; its tasks must carry truths.
    #[arg(long)]
    pub test: PathBuf,
    /// average, ind_ml, ind_vb, latent_ml, or latent_vb.
    #[arg(long)]
    pub method: String,
    /// Latent rank; only the latent methods read it.
    #[arg(long, default_value_t = 3)]
    pub rank: usize,
    /// Report JSON to write; omitted prints to standard output only.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitFlags,
    #[command(flatten)]
    pub sgd: SgdFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep spec JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: PathBuf,
    /// Cell CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}
