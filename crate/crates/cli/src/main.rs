//! `pseudoris`: generate, filter and inspect pseudo referring-expression
//! annotations.
//!
//! Exit codes: 0 success, 1 partial failure (some images or candidates were
//! skipped, or an output could not be written), 2 configuration or input error.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "pseudoris",
    version,
    about = "Distinctive pseudo referring-expression annotations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption, score and filter every mask of every image in a directory.
    Generate(GenerateArgs),
    /// Re-filter a candidate dump at a new metric or threshold.
    Filter(FilterArgs),
    /// Print corpus statistics of an annotation file.
    Stats(StatsArgs),
    /// Print the masks, captions and scores of one image.
    Inspect(InspectArgs),
    /// Run the synthetic ablation benchmark.
    SynthBench(SynthBenchArgs),
    /// Write synthetic scenes as PNG images plus mask files.
    SynthRender(SynthRenderArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of `<image stem>.json` mask files; masks are extracted with
    /// the mask backend otherwise.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Directory of coarse mask files used to select among the fine masks.
    #[arg(long)]
    coarse_masks: Option<PathBuf>,
    /// Annotation file to write; candidates, stats and manifest go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend_captioner: Option<String>,
    #[arg(long)]
    backend_scorer: Option<String>,
    #[arg(long)]
    mask_source: Option<String>,
    /// uniqueness, correctness or distinctiveness.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Candidate dump (or any annotation file) with scores.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "distinctiveness")]
    metric: String,
    #[arg(long, default_value_t = pseudoris::scoring::DEFAULT_TAU)]
    tau: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Also write the statistics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    image_id: String,
}

#[derive(Debug, Args)]
pub struct SynthBenchArgs {
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, default_value_t = 1.0)]
    overlap: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Calibration temperature of the distinctive decoders.
    #[arg(long)]
    temperature: Option<f64>,
    /// average or weighted.
    #[arg(long)]
    mode: Option<String>,
    /// Machine-readable report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthRenderArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 1.0)]
    overlap: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Filter(a) => commands::filter(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::SynthBench(a) => commands::synth_bench(&a),
        Command::SynthRender(a) => commands::synth_render(&a),
    };
    match result {
        Ok(code) => code.into(),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code.into()
        }
    }
}
