//! Library side of the `aggdiff` command-line driver.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use aggdiff::experiment::ExperimentError;
use aggdiff::infer::InferError;
use aggdiff::learn::LearnError;
use aggdiff::sde::SdeError;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs. Exit code 1.
    Usage(String),
    /// Divergence or non-finite values. Exit code 2.
    Numerical(String),
    /// Filesystem failures. Exit code 1.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<SdeError> for CliError {
    fn from(e: SdeError) -> Self {
        match e {
            SdeError::NonFiniteDrift { .. } | SdeError::NonFiniteState { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Diverged { .. } => CliError::Numerical(e.to_string()),
            LearnError::Sde(e) => e.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Learn(e) => e.into(),
            InferError::Sde(e) => e.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Learn(e) => e.into(),
            ExperimentError::Infer(e) => e.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}

usage_from!(
    aggdiff::data::DataError,
    aggdiff::ot::OtError,
    aggdiff::nn::NnError,
    aggdiff::nn::CheckpointError
);

#[derive(Parser)]
#[command(name = "aggdiff", version, about = "Learn hidden diffusions from aggregate observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: observed.csv and held-out truth.csv.
    Generate(RunArgs),
    /// Train the hidden model (method=legend) or a baseline (ou, nn).
    Train(RunArgs),
    /// Predict the observation at k from the bags before it.
    Filter(RunArgs),
    /// Predict the missing observation at k from every other bag.
    Smooth(RunArgs),
    /// Exact W1 between a prediction and a truth file.
    Eval(EvalArgs),
    /// SVG scatter and per-dimension histograms.
    Plot(PlotArgs),
    /// List configuration keys.
    Keys,
}

/// Options shared by the pipeline commands. Each flag sets the config key of
/// the same name; `--set` overrides come last.
#[derive(Args)]
struct RunArgs {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    process: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    observed: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    head_iterations: Option<String>,
    #[arg(long)]
    plots: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("data", &self.data),
            ("dataset", &self.dataset),
            ("process", &self.process),
            ("dim", &self.dim),
            ("observed", &self.observed),
            ("task", &self.task),
            ("k", &self.k),
            ("method", &self.method),
            ("out", &self.out),
            ("seed", &self.seed),
            ("checkpoint", &self.checkpoint),
            ("truth", &self.truth),
            ("samples", &self.samples),
            ("iterations", &self.iterations),
            ("head_iterations", &self.head_iterations),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.plots {
            cfg.set("plots", "true")?;
        }
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted samples (sample or series format).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth samples (sample or series format).
    #[arg(long)]
    truth: PathBuf,
    /// Time to select from series-format files.
    #[arg(long)]
    k: Option<usize>,
    /// Subsample the larger batch when sizes differ.
    #[arg(long)]
    subsample: bool,
    /// Seed for subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write eval.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Time to select from series-format files.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins.
    #[arg(long, default_value_t = 40)]
    bins: usize,
    /// Two columns to scatter when the data has more than two, e.g. 0,2.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a.resolve()?),
        Command::Train(a) => commands::train(&a.resolve()?),
        Command::Filter(a) => commands::filter(&a.resolve()?),
        Command::Smooth(a) => commands::smooth(&a.resolve()?),
        Command::Eval(a) => commands::eval(&a.pred, &a.truth, a.k, a.subsample, a.seed, a.out.as_deref()),
        Command::Plot(a) => commands::plot(
            a.pred.as_deref(),
            a.truth.as_deref(),
            a.k,
            &a.out,
            a.bins,
            a.dims.as_deref(),
        ),
        Command::Keys => {
            for (k, desc) in config::KEYS {
                println!("{k:<22} {desc}");
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
