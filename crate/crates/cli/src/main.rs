use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use wecdg::autodiff::Precision;
use wecdg::wavelet::Band;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "wecdg", version, about = "Wavelet-domain exposure correction with degradation descriptors")]
struct Cli {
    /// Seed for initialization, sampling and data synthesis.
    #[arg(long, global = true, env = "WECDG_SEED")]
    seed: Option<u64>,

    /// JSON run configuration with optional `model`, `train` and `synth` sections.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,

    /// Arithmetic precision of the network.
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,

    #[command(subcommand)]
    command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: wecdg::Error| e.to_string())
}

fn parse_band(s: &str) -> Result<Band, String> {
    s.parse().map_err(|e: wecdg::Error| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Auto,
    Manual,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic under/over-exposure dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of ground-truth images.
        #[arg(long)]
        count: Option<usize>,
        /// Side length in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the descriptor module (image encoder and text embedder).
    TrainSdgm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the restoration network.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Descriptor-module checkpoint whose text embedder supplies descriptors.
        #[arg(long)]
        sdgm: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Report PSNR and SSIM per exposure tag.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "manual")]
        mode: Mode,
        #[arg(long, required_if_eq("mode", "auto"))]
        sdgm: Option<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Correct the exposure of one image.
    Correct {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Restoration checkpoint; a freshly seeded network is used without one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "manual")]
        mode: Mode,
        /// Descriptor label for manual mode: under, well, over or mix(a,b,w).
        #[arg(long, required_if_eq("mode", "manual"))]
        descriptor: Option<String>,
        #[arg(long, required_if_eq("mode", "auto"))]
        sdgm: Option<PathBuf>,
    },
    /// Match images against the descriptor set.
    Classify {
        #[arg(long)]
        sdgm: PathBuf,
        /// Score every entry of a manifest and report accuracy.
        #[arg(long, conflicts_with = "images")]
        manifest: Option<PathBuf>,
        #[arg(required_unless_present = "manifest")]
        images: Vec<PathBuf>,
    },
    /// Write the wavelet subbands of an image.
    Decompose {
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        levels: usize,
    },
    /// Exchange low- or high-frequency bands between two images.
    Swap {
        #[arg(long, value_parser = parse_band)]
        which: Band,
        a: PathBuf,
        b: PathBuf,
        /// Write the clamped results here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every block's gradients.
    Gradcheck {
        /// Check only this block.
        #[arg(long)]
        block: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Count trainable network parameters.
    Paramcount {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // `required_if_eq` does not fire when the mode comes from its default.
    if let Command::Correct {
        mode: Mode::Manual,
        descriptor: None,
        ..
    } = &cli.command
    {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "--descriptor is required in manual mode")
            .exit();
    }
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
