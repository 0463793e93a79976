//! `sitsfuse`: synthetic data, training, evaluation and analysis of
//! multimodal fusion models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A usage or configuration problem; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "sitsfuse", version, about = "Multimodal satellite image time series fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Experiment config file plus flag overrides; flags win.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dataset directory (otherwise generated from the synth section).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output root; defaults to $SITSFUSE_OUT or ./runs.
    #[arg(long)]
    pub out_root: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// early, mid, late, decision, S2, S1A or S1D.
    #[arg(long)]
    pub scheme: Option<String>,
    /// parcel or semantic.
    #[arg(long)]
    pub task: Option<String>,
    /// Enable auxiliary supervision.
    #[arg(long)]
    pub aux: bool,
    /// Enable temporal dropout.
    #[arg(long)]
    pub tdrop: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Number of synthetic patches.
    #[arg(long)]
    pub patches: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; defaults to <out root>/dataset.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to <out root>/<scheme>_<task>[_aux][_tdrop].
        #[arg(long)]
        run: Option<PathBuf>,
        /// Continue an existing run up to the configured epoch count.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory overriding the run's config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the run's test fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Remove optical acquisitions at inference and evaluate.
    Ablate {
        /// Run directories; repeat for several models.
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        /// Descending keep ratios, e.g. 1.0,0.5,0.1.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Output directory; defaults to <out root>/ablation.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train with SGD and record the per-module gradient flow.
    Gradflow {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Probe every n-th step.
        #[arg(long, default_value_t = 1)]
        every: usize,
        #[arg(long)]
        force: bool,
    },
    /// Merge report.json files and render tables and plots.
    Report {
        /// Directories containing report.json, or report files.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the model × enhancement matrix.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to <out root>/benchmark.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subset of models, e.g. S2,late.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        /// Subset of base, tdrop, aux, aux_tdrop.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Show the fold assignment of a dataset.
    Folds {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// List every patch.
        #[arg(long)]
        list: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { cfg, out, force } => commands::synth(&cfg, out, force),
        Command::Train { cfg, run, resume, force } => commands::train(&cfg, run, resume, force),
        Command::Eval { run, dataset, fold } => commands::eval(&run, dataset, fold),
        Command::Ablate {
            run,
            ratios,
            repeats,
            seed,
            dataset,
            fold,
            out,
            jobs,
        } => commands::ablate(&run, ratios, repeats, seed, dataset, fold, out, jobs),
        Command::Gradflow { cfg, run, every, force } => commands::gradflow(&cfg, run, every, force),
        Command::Report { input, out } => commands::report(&input, &out),
        Command::Benchmark {
            cfg,
            out,
            models,
            variants,
            jobs,
            force,
        } => commands::benchmark(&cfg, out, models, variants, jobs, force),
        Command::Folds { cfg, list } => commands::folds(&cfg, list),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<sits_fusion::Error>() {
        Some(sits_fusion::Error::Config(_) | sits_fusion::Error::Validation(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
