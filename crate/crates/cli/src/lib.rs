//! The `rankcount` command-line tool.
//!
//! Every subcommand writes a [`RunManifest`] next to its output recording
//! the resolved arguments (including the seed) and the SHA-256 of each
//! artifact, so `rankcount rerun --manifest F` can repeat and verify a run.

mod commands;
mod manifest;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub use manifest::{manifest_path, output_key, resolve_output, RunManifest};
pub use report::{comparison_table, write_triptych};

/// Exit code for success (including `--help`).
pub const EXIT_OK: i32 = 0;
/// Exit code for invalid command-line usage.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rankcount", version, about = "Crowd counting with ranked unlabeled crops")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Generate ranked chains of nested crops from an image directory.
    Rankgen(RankgenArgs),
    /// Train a counting network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated dataset.
    Eval(EvalArgs),
    /// Combine evaluation reports into a table and render density triptychs.
    Report(ReportArgs),
    /// Run the seeded regime comparison on synthetic data.
    Compare(CompareArgs),
    /// Repeat a recorded run and check its artifacts.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub min_count: usize,
    #[arg(long, default_value_t = 100)]
    pub max_count: usize,
    /// Poisson mean count; overrides the uniform min/max range.
    #[arg(long)]
    pub density: Option<f64>,
    /// Scene size as HEIGHTxWIDTH.
    #[arg(long, default_value = "256x256")]
    pub size: String,
    #[arg(long, default_value_t = 6.0)]
    pub blob_min: f64,
    #[arg(long, default_value_t = 12.0)]
    pub blob_max: f64,
    #[arg(long, default_value_t = 0.0)]
    pub perspective: f64,
    #[arg(long, default_value_t = 0.12)]
    pub clutter: f64,
    #[arg(long, default_value = "scene")]
    pub prefix: String,
    #[arg(long, env = "RANKCOUNT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankgenArgs {
    /// Directory of images (PNG/PGM).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Side scale factor between consecutive crops.
    #[arg(long, default_value_t = 0.75)]
    pub s: f64,
    /// Anchor region ratio.
    #[arg(long, default_value_t = 8.0)]
    pub r: f64,
    /// `area` (region area is 1/r of the image) or `side` (sides are 1/r).
    #[arg(long, default_value = "area")]
    pub anchor_mode: String,
    #[arg(long, default_value_t = 32)]
    pub min_side: u32,
    #[arg(long, default_value_t = 1)]
    pub per_image: usize,
    #[arg(long, env = "RANKCOUNT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Precomputed chains; without it chains are drawn fresh each batch.
    #[arg(long)]
    pub chains: Option<PathBuf>,
    /// Unlabeled image directory (defaults to the corpus the chains came from).
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: `toy` or `paper`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Any configuration key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Annotated held-out set evaluated during and after training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, env = "RANKCOUNT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Resize factor applied before inference.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Tile side for tiled inference.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub label: Option<String>,
    /// Tag the report as a cross-dataset transfer evaluation.
    #[arg(long)]
    pub transfer: bool,
    /// Required architecture descriptor, e.g. `in=1;widths=8,16,16`.
    #[arg(long)]
    pub expect_arch: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation reports (CSV paths with JSON sidecars).
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// Checkpoint used for density triptychs.
    #[arg(long, requires = "dataset")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Any training key applied to every arm, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to a different output location.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compare new artifact hashes against the manifest (paths relative to each output root).
    #[arg(long)]
    pub verify: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_USAGE,
                _ => EXIT_USAGE,
            };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::run(cli.command, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
