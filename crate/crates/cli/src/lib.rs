//! Command-line driver for `taskprune`.
//!
//! Every command is a function from parsed arguments to files on disk.
//! [`run`] parses arguments, configures the worker pool from
//! `TASKPRUNE_THREADS`, dispatches, and returns the process exit code:
//! 0 on success, 1 for usage errors, 2 when a pipeline stage fails, 3 for
//! I/O failures.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixture;
pub mod hash;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use taskprune::calibration::Balance;
use taskprune::masking::Scope;
use taskprune::model::Nonlinearity;
use taskprune::taskaware::{AlphaScale, NormMode};

use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

pub const THREADS_ENV: &str = "TASKPRUNE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "taskprune", version, about = "Task-aware one-shot pruning of feed-forward language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the bundled toy fixture: a trained model plus corpus files.
    Fixture(FixtureArgs),
    /// Train a model on one or more corpus files.
    Train(TrainArgs),
    /// Report loss, perplexity and next-token accuracy of a model.
    Eval(EvalArgs),
    /// Prune with task-aware scores from a general and a task corpus.
    Prune(RunArgs),
    /// Prune with activation-weighted magnitude scores from the general corpus only.
    Baseline(RunArgs),
    /// Compare baseline and task-aware pruning over alpha and sparsity grids.
    Sweep(SweepArgs),
    /// Turn a sweep result into plotting tables.
    PlotData(PlotDataArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of embedding channels shared by both corpora.
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "64,64")]
    pub hidden: String,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lr: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training corpus (JSON lines); repeat to concatenate several.
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub embed_dim: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "64,64")]
    pub hidden: String,
    #[arg(long, default_value = "relu")]
    pub nonlinearity: Nonlinearity,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mark the output projection as prunable.
    #[arg(long)]
    pub prune_output: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation corpus; repeat for several.
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<PathBuf>,
    /// Apply this mask before evaluating.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub general_corpus: PathBuf,
    /// Required by `prune` and `sweep`.
    #[arg(long)]
    pub task_corpus: Option<PathBuf>,
    /// General held-out split; defaults to the general corpus.
    #[arg(long)]
    pub general_eval: Option<PathBuf>,
    /// Task held-out split; defaults to the task corpus.
    #[arg(long)]
    pub task_eval: Option<PathBuf>,
    /// Task split used to select alpha in sweeps; defaults to the task held-out split.
    #[arg(long)]
    pub task_valid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    /// Per-layer absolute threshold NAME=VALUE; overrides --alpha for that layer.
    #[arg(long = "layer-alpha")]
    pub layer_alpha: Vec<String>,
    /// `absolute`, or `layer-median` to multiply alpha by each layer's median |delta|.
    #[arg(long, default_value = "absolute")]
    pub alpha_scale: AlphaScale,
    /// `rms` compares root-mean-square activations, `raw-l2` compares raw L2 norms.
    #[arg(long, default_value = "rms")]
    pub norm_mode: NormMode,
    /// Ratio such as `0.5`, or an N:M pattern such as `2:4`.
    #[arg(long, default_value = "0.5")]
    pub sparsity: String,
    /// Ranking pool for unstructured sparsity: row, layer or global.
    #[arg(
        long,
        default_value = "layer",
        long_help = "Ranking pool for unstructured sparsity: row, layer or global.\n\n\
            The default is `layer`: every prunable layer loses the same fraction of weights. \
            `global` ranks all prunable weights of the model together, which is the literal \
            whole-model procedure, but activation scales differ between layers and a single \
            pool can empty whole layers at high ratios. Reports record the scope used."
    )]
    pub scope: Scope,
    /// Divide activation norms by the token count.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub mean_normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibration sequences sampled from each corpus.
    #[arg(long, default_value_t = 128)]
    pub calib_samples: usize,
    /// `sequences` samples equal sequence counts, `tokens` also equalises token counts.
    #[arg(long, default_value = "sequences")]
    pub balance: Balance,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated alpha grid.
    #[arg(long, default_value = "0.01,0.05,0.1,0.2,0.5,1,2")]
    pub alphas: String,
    /// Comma-separated sparsity specs; defaults to --sparsity.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Also write the mask of every task-aware row.
    #[arg(long)]
    pub write_masks: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PlotDataArgs {
    /// `sweep.json` written by the sweep command.
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("taskprune: {e}");
            e.exit_code()
        }
    }
}

/// Sizes the global worker pool from `TASKPRUNE_THREADS` when set. Results do
/// not depend on the pool size.
pub fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A pool configured earlier in the same process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Fixture(a) => commands::fixture(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::PlotData(a) => commands::plot_data(&a),
    }
}
