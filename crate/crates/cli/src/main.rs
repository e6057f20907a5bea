//! `chronolens`: date parsing, linear baselines, micro-net fine-tuning and
//! unit analysis from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 internal. Failures print one
//! `error kind=<Kind> <message>` line on standard error.

mod commands;
mod support;

use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use chronolens::dates::YearRange;
use clap::{Args, Parser, Subcommand};

use support::{parse_window, Failure, SplitArg};

#[derive(Debug, Parser)]
#[command(
    name = "chronolens",
    version,
    about = "Estimate when objects were made from images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Args)]
struct BinningArgs {
    /// Inclusive year window, START:END.
    #[arg(long, value_parser = parse_window, default_value = "1900:2009")]
    window: YearRange,
    /// Number of equal-width bins over the window.
    #[arg(long, default_value_t = 11)]
    bins: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resolve every manifest record to a year range and bin.
    ParseDates {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        binning: BinningArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a one-vs-rest linear SVM over decade bins.
    TrainSvm(LinearArgs),
    /// Train a linear epsilon-SVR on years.
    TrainSvr(LinearArgs),
    /// Train a micro-net, optionally starting from a base model.
    Finetune(FinetuneArgs),
    /// Print the mean absolute error in years of a model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Feature file aligned with the manifest (linear models only).
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        binning: BinningArgs,
    },
    /// Temporal entropy of every unit of a layer.
    Entropy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "fc2")]
        layer: String,
        #[arg(long, default_value_t = 500)]
        topn: usize,
        #[arg(long, default_value_t = chronolens::analysis::ENTROPY_HIST_BINS)]
        hist_bins: usize,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[command(flatten)]
        binning: BinningArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Occlusion discrepancy map of one unit on one image.
    Occlude {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "fc2")]
        layer: String,
        #[arg(long)]
        unit: usize,
        #[command(flatten)]
        occlusion: OcclusionArgs,
        /// Also report the maximum-activation patch of this side.
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        grayscale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare unit rankings and patches with external detectors.
    Correlate {
        #[arg(long)]
        detectors: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "fc2")]
        layer: String,
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        /// Units reported per detector.
        #[arg(long, default_value_t = 5)]
        units: usize,
        /// Top images per unit compared by IoU.
        #[arg(long, default_value_t = 20)]
        images: usize,
        #[arg(long, default_value_t = chronolens::analysis::DEFAULT_PATCH)]
        patch: usize,
        #[command(flatten)]
        occlusion: OcclusionArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collection decades and their trend over show years.
    Influence {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        collections: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        aggregate: AggregateArg,
        #[command(flatten)]
        binning: BinningArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct LinearArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Regularisation constant [default: 0.1 for SVM, 100 for SVR].
    #[arg(long)]
    c: Option<f64>,
    /// Insensitivity width of the SVR loss.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 2000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// L2-normalise feature rows.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[command(flatten)]
    binning: BinningArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Pretrained net; a fresh one is initialised when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 11)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    decay: f64,
    #[arg(long, default_value_t = 0.00001)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Update only the classification head.
    #[arg(long)]
    head_only: bool,
    /// Keep the base model's head instead of replacing it.
    #[arg(long)]
    keep_head: bool,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[command(flatten)]
    binning: BinningArgs,
    #[arg(long)]
    out: PathBuf,
    /// Loss history file; standard output when absent.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args)]
struct OcclusionArgs {
    /// Side of the square occluder.
    #[arg(long, default_value_t = 11)]
    occ: usize,
    #[arg(long, default_value_t = 3)]
    stride: usize,
    #[arg(long, default_value_t = 0.0)]
    fill: f64,
    /// Fill with the image mean instead of `--fill`.
    #[arg(long)]
    mean_fill: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum AggregateArg {
    Mean,
    Vote,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("CHRONOLENS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            support::usage(format!(
                "CHRONOLENS_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Internal(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    panic::set_hook(Box::new(|_| {}));
    let outcome =
        panic::catch_unwind(|| configure_threads().and_then(|()| commands::run(cli.command)));
    let failure = match outcome {
        Ok(Ok(())) => return ExitCode::SUCCESS,
        Ok(Err(f)) => f,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Failure::Internal(msg)
        }
    };
    eprintln!("{failure}");
    ExitCode::from(failure.exit_code() as u8)
}
