//! `impd`: generate synthetic data, train, evaluate and composite.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug, Serialize)]
#[command(name = "impd", version, about = "Occlusion masks for AR from implicit depth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Render synthetic RGB-D sequences.
    Synth(SynthArgs),
    /// Train the implicit occlusion model.
    Train(TrainArgs),
    /// Train the depth-regression baseline.
    TrainBaseline(TrainArgs),
    /// Occlusion IoU against frontoparallel planes.
    EvalOcclusion(EvalOcclusionArgs),
    /// Depth error; implicit models are decoded by binary search.
    EvalDepth(EvalDepthArgs),
    /// Flicker of masks rolled out over sub-sequences.
    EvalTemporal(EvalTemporalArgs),
    /// Insert a virtual plane into one frame.
    Composite(CompositeArgs),
    /// Decode a depth map from an implicit model.
    ExtractDepth(ExtractDepthArgs),
    /// Gradient checks and metric cross-checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Sequence directories, or directories holding them.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Encoder initialization from a regression checkpoint (implicit only).
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Validation sequences for per-plane threshold selection (implicit only).
    #[arg(long, num_args = 1..)]
    pub val: Vec<PathBuf>,
    #[arg(long, default_value = "0.5:5.0:0.5")]
    pub planes: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalOcclusionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = "0.5:5.0:0.5")]
    pub planes: String,
    /// Validation data for threshold selection; otherwise thresholds stored
    /// in the checkpoint, or 0.5.
    #[arg(long, num_args = 1..)]
    pub val: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub frame_step: usize,
    /// Blending band of the regression baseline, meters.
    #[arg(long, default_value_t = 0.2)]
    pub band: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 12)]
    pub search_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub d_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub d_max: f64,
    /// Bisect in inverse depth instead of depth.
    #[arg(long)]
    pub inverse_depth: bool,
    /// Classifier threshold; defaults to the checkpoint's table or 0.5.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalDepthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 1)]
    pub frame_step: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalTemporalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub subsequence: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Never feed the previous mask back.
    #[arg(long)]
    pub no_temporal: bool,
    #[arg(long, default_value_t = 0.2)]
    pub band: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CompositeArgs {
    /// Implicit or regression checkpoint; ground truth depth when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// One sequence directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value_t = 2.0)]
    pub plane_depth: f64,
    #[arg(long, default_value_t = 0.2)]
    pub band: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ExtractDepthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[command(flatten)]
    pub search: SearchArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() {
    let Ok(value) = std::env::var("IMPD_THREADS") else {
        return;
    };
    match value.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring IMPD_THREADS={value:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    configure_threads();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
