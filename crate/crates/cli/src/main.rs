//! `lvtq`: synthetic cohorts, training, inference, evaluation and the review
//! service from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod provenance;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lvtq_core::Population;

#[derive(Parser, Debug)]
#[command(name = "lvtq", version, about = "Left-ventricular trabeculation quantification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistKind {
    Uniform,
    Normal,
    Bimodal,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom cohort.
    Synth(SynthArgs),
    /// Cross-validated training from an experiment config.
    Train(TrainArgs),
    /// Segment and quantify studies with a trained checkpoint.
    Infer(InferArgs),
    /// Compare predictions with references, or score a label-pair file.
    Evaluate(EvaluateArgs),
    /// Run the review service.
    Serve(ServeArgs),
}

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub patients: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 5)]
    pub min_slices: usize,
    #[arg(long, default_value_t = 9)]
    pub max_slices: usize,
    #[arg(long, value_enum, default_value_t = DistKind::Bimodal)]
    pub vt_dist: DistKind,
    /// Lower bound (uniform) or low mode (bimodal).
    #[arg(long, default_value_t = 15.0)]
    pub vt_low: f64,
    /// Upper bound (uniform) or high mode (bimodal).
    #[arg(long, default_value_t = 38.0)]
    pub vt_high: f64,
    #[arg(long, default_value_t = 25.0)]
    pub vt_mean: f64,
    #[arg(long, default_value_t = 5.0)]
    pub vt_std: f64,
    /// Share of the high mode (bimodal).
    #[arg(long, default_value_t = 0.5)]
    pub vt_weight: f64,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub deformation: Option<f64>,
    /// Use the distribution-shifted phantom population.
    #[arg(long)]
    pub shifted: bool,
    #[arg(long)]
    pub population: Option<Population>,
    #[arg(long)]
    pub id_prefix: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (JSON training configuration).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep folds that already finished in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train only on patients of these populations.
    #[arg(long)]
    pub population: Vec<Population>,
}

#[derive(clap::Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patient directory; repeat for several.
    #[arg(long = "study", required = true)]
    pub studies: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = lvtq_core::quantify::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub opacity: f32,
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of `<patient>/mask_###.png` predictions.
    #[arg(long, requires = "references", conflicts_with = "pairs")]
    pub predictions: Option<PathBuf>,
    /// Reference cohort directory.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// CSV with `predicted,reference[,score]` diagnosis columns.
    #[arg(long, required_unless_present = "predictions")]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = lvtq_core::quantify::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict references to these populations.
    #[arg(long)]
    pub population: Vec<Population>,
}

#[derive(clap::Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = lvtq_review::DEFAULT_VALIDITY_THRESHOLD)]
    pub threshold: f64,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<lvtq_core::Error>() {
        Some(lvtq_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Infer(a) => commands::infer(&a, &argv),
        Command::Evaluate(a) => commands::evaluate(&a, &argv),
        Command::Serve(a) => commands::serve(&a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
