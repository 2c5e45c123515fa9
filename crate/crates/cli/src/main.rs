//! `drape`: build a style store from closet photos, generate garment designs
//! from an outline, and run the attribute-recovery evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drape::optim::InitMode;

/// Exit status for malformed command lines.
const EXIT_USAGE: u8 = 1;
/// Exit status for filesystem failures.
const EXIT_IO: u8 = 2;
/// Exit status for bad inputs: undecodable images, corrupt stores, unknown attributes.
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "drape", version, about = "Garment design by Gram-matrix style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add a closet image and its attributes to a style store.
    Ingest(IngestArgs),
    /// Synthesize a design for an outline from stored styles.
    Generate(GenerateArgs),
    /// Run the attribute-recovery experiment and write an F1 report.
    Evaluate(EvaluateArgs),
    /// Print a store's fingerprint and entries.
    Inspect(InspectArgs),
    /// Write the garment mask of an outline image.
    Mask(MaskArgs),
}

#[derive(Args)]
struct WeightsArg {
    /// NSTW weights container, or `tiny:<seed>` for the seeded test network.
    #[arg(long, env = "NSTW_WEIGHTS")]
    weights: String,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated attribute labels.
    #[arg(long, value_delimiter = ',', required = true)]
    attrs: Vec<String>,
    /// Entry id; defaults to the image file stem.
    #[arg(long)]
    id: Option<String>,
    /// Style layers for a new store; ignored when the store exists.
    #[arg(long, value_delimiter = ',')]
    style_layers: Option<Vec<String>>,
    /// Canvas side for a new store; ignored when the store exists.
    #[arg(long)]
    canvas: Option<u32>,
    #[command(flatten)]
    weights: WeightsArg,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    store: PathBuf,
    /// Outline image on a white background.
    #[arg(long)]
    uco: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    attrs: Vec<String>,
    /// Output PNG; the sidecar JSON is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// JSON generation config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// `noise` or `content`.
    #[arg(long)]
    init: Option<InitMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum style images per requested attribute.
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    content_layer: Option<String>,
    #[command(flatten)]
    weights: WeightsArg,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON evaluation plan; the synthetic desk-scale plan when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for generation jobs (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum channel value counted as background white.
    #[arg(long)]
    threshold: Option<u8>,
    /// Skip the 3×3 closing.
    #[arg(long)]
    no_closing: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<drape::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_DATA };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Mask(a) => commands::mask(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
