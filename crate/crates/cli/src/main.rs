//! `parkrate`: synthetic data, labeling, feature building, training,
//! evaluation, cross-validation, the smoothing ablation and prediction.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "parkrate", version, about = "Fine-grained parking violation rate prediction")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// `key = value` file for the command's configuration; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory receiving the outputs and manifest.json.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city: sectors, PoIs, weather, calendar, scans and truth.
    Synth(SynthArgs),
    /// Turn scans into per-cell labels.
    Label(LabelArgs),
    /// Featurize labels into a dataset and fit the training-split standardizer.
    Build(BuildArgs),
    /// Train on the training split of a dataset and report test MAE.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval(EvalArgs),
    /// k-fold cross-validation curves.
    Cv(CvArgs),
    /// Raw versus smoothed labels for training and testing, as a 2×2 table.
    Ablation(AblationArgs),
    /// Predict violation rates for dataset rows or whole days.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_sectors: Option<usize>,
    #[arg(long)]
    pub n_days: Option<usize>,
    #[arg(long)]
    pub scan_coverage: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Raw,
    Smoothed,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SmoothingArgs {
    #[arg(long)]
    pub sigma_minutes: Option<f64>,
    #[arg(long)]
    pub neighbor_slots: Option<u32>,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    /// Data directory holding scans.csv and sectors.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Smoothed)]
    pub mode: Mode,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Hours averaged for the weather features.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum SplitKind {
    Random,
    Temporal,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitKind::Random)]
    pub split: SplitKind,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluate every row instead of the held-out split.
    #[arg(long)]
    pub all: bool,
    #[arg(long, value_enum, default_value_t = SplitKind::Random)]
    pub split: SplitKind,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    /// Row-level CV of one dataset.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub dataset: Option<PathBuf>,
    /// Session-level CV comparing raw and smoothed training labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Ground truth for oracle MAE; defaults to truth.csv in the data directory when present.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub smoothing: SmoothingArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub dataset: Option<PathBuf>,
    /// Data directory providing sectors, PoIs, weather and calendar.
    #[arg(long, requires = "date")]
    pub data: Option<PathBuf>,
    /// Date to predict every sector and slot for; repeatable.
    #[arg(long)]
    pub date: Vec<chrono::NaiveDate>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
