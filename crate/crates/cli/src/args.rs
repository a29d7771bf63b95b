use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "patchsae", version, about = "Sparse autoencoders for patch activations")]
pub struct Cli {
    /// Seed for every random choice of the run (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for probe fitting and sweeps.
    #[arg(long, global = true, env = "PATCHSAE_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Global {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-dictionary dataset and its ground truth.
    Synth(SynthArgs),
    /// Run the external activation extractor.
    Extract(ExtractArgs),
    /// Train one SAE from a TOML config, or fit a k-means/PCA baseline.
    Train(TrainArgs),
    /// Train a grid of SAEs and write the (NMSE, L0) Pareto frontier.
    Sweep(SweepArgs),
    /// Evaluate an SAE, k-means or PCA checkpoint on labeled splits.
    Eval(EvalArgs),
    /// Dump top-activating patches per latent as image grids.
    Exhibits(ExhibitArgs),
    /// Rebuild the comparison table from stored evaluations.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n_true: usize,
    #[arg(long)]
    pub s: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Label each row by a concept atom; atoms `0..classes` become classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Seed of the planted dictionary (defaults to --seed), so train and
    /// validation splits can share one dictionary.
    #[arg(long)]
    pub dict_seed: Option<u64>,
    #[arg(long, default_value_t = 65536)]
    pub rows_per_shard: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    /// Extractor executable.
    #[arg(long, default_value = "patchsae-extract")]
    pub tool: String,
    /// Arguments passed through after `--`.
    #[arg(last = true)]
    pub passthrough: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// SAE config (TOML).
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub config: Option<PathBuf>,
    /// Fit a baseline instead of an SAE.
    #[arg(long, value_enum, requires = "size")]
    pub baseline: Option<BaselineArg>,
    /// Clusters (k-means) or components (PCA).
    #[arg(long)]
    pub size: Option<usize>,
    /// Baseline mini-batch size.
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// Baseline mini-batch updates (defaults to one pass over the data).
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// TOML with `learning_rates`, `lambdas` and a `[base]` train config.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Validation split for NMSE/L0 (defaults to --data).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Grid points trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Pick the run with the lowest best-latent training probe loss
    /// (needs labels on --data).
    #[arg(long)]
    pub select: bool,
    #[arg(long, default_value_t = 2_000_000)]
    pub row_budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Kmeans,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BiasInitArg {
    LogOdds,
    Prevalence,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    /// Training rows used for latent selection.
    #[arg(long, default_value_t = 2_000_000)]
    pub row_budget: usize,
    #[arg(long, value_enum, default_value_t = BiasInitArg::LogOdds)]
    pub bias_init: BiasInitArg,
    /// Row label for the rendered table (defaults to the model kind).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ExhibitArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated latent ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "per_class")]
    pub latents: Vec<usize>,
    /// Use each class's best latent (needs labels).
    #[arg(long)]
    pub per_class: bool,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Directory holding the source images named by the manifest's image ids.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Evaluation directories written by `eval`.
    #[arg(required = true)]
    pub evals: Vec<PathBuf>,
    /// Mark, per model kind, the entry with the lowest training probe loss.
    #[arg(long)]
    pub select: bool,
}
