//! `patchfm`: train, generate, forecast, evaluate, ablate and plot.
//!
//! Exit codes: 0 success, 2 usage or configuration problems, 3 numeric
//! failure during training or inference.

mod ablate;
mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "patchfm", version, about = "Patch-Transformer time-series forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GenKind {
    Kernelsynth,
    Tsmixup,
    Sine,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Axis {
    MaskRatio,
    NCpm,
    Context,
    Depth,
    Width,
    Quantiles,
    Data,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config leaf, e.g. `train.mask_ratio=0.6`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Write synthetic series as JSON lines.
    Generate {
        kind: GenKind,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source series for mixing.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Ids (one per line, or JSONL series) that mixing must avoid.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile forecasts for the next `horizon` steps of every input series.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Comma-separated subset of the model's levels.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Keep quantile crossings instead of sorting each row.
        #[arg(long)]
        no_sort: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against Seasonal Naive and Naive.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seasonality: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        windows: usize,
        /// `target-diff` (default) or `seasonal-insample`.
        #[arg(long, default_value = "target-diff")]
        mase_variant: String,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        no_sort: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and compare one variant per value along an ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; for `data`, join source kinds with `+`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Render a forecast (and optionally the truth) as SVG.
    Plot {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Series to draw; defaults to the first record.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Error carrying the process exit code.
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl From<patchfm::Error> for Failure {
    fn from(e: patchfm::Error) -> Self {
        let code = match e {
            patchfm::Error::Numeric(_) => 3,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        patchfm::Error::from(e).into()
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("PATCHFM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| usage(format!("PATCHFM_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            resume,
            sets,
        } => commands::train(&config, &out, seed, resume.as_deref(), sets),
        Command::Generate {
            kind,
            num,
            length,
            seed,
            pool,
            exclude,
            out,
        } => commands::generate(kind, num, length, seed, pool.as_deref(), exclude.as_deref(), &out),
        Command::Forecast {
            ckpt,
            input,
            horizon,
            levels,
            no_sort,
            seed,
            out,
        } => commands::forecast(&ckpt, &input, horizon, levels, !no_sort, seed, &out),
        Command::Evaluate {
            ckpt,
            dataset,
            seasonality,
            horizon,
            windows,
            mase_variant,
            levels,
            no_sort,
            seed,
            report,
        } => commands::evaluate(commands::EvaluateArgs {
            ckpt: &ckpt,
            dataset: &dataset,
            seasonality,
            horizon,
            windows,
            mase_variant: &mase_variant,
            levels,
            sort: !no_sort,
            seed,
            report: &report,
        }),
        Command::Ablate {
            config,
            axis,
            values,
            out,
            seed,
            sets,
        } => ablate::ablate(&config, axis, &values, &out, seed, sets),
        Command::Plot { forecast, truth, id, out } => plot::plot(&forecast, truth.as_deref(), id.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
