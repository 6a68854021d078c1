use std::path::PathBuf;
use std::process::ExitCode;

use agnet_cli::commands::{self, format_report, TrainOptions};
use agnet_cli::dataset::Split;
use agnet_cli::synthetic::{generate_synthetic, SyntheticConfig};
use agnet_cli::{CliError, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "agnet", version, about = "Keypoint-driven region attention: train, evaluate and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a blob-layout synthetic dataset in the ingest layout.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Training images per class; the test split gets a quarter.
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epochs (overrides train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print or save the region proposal for one image as JSON.
    InspectRegions {
        image: PathBuf,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render keypoints and region boxes over an image.
    Visualize {
        image: PathBuf,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Index of the secondary box drawn dashed.
        #[arg(long, default_value_t = 0)]
        secondary: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("AGNET_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Usage(format!("AGNET_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(CliError::Usage("AGNET_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenerateSynthetic { out, classes, per_class, size, seed } => {
            let s = generate_synthetic(&out, &SyntheticConfig { classes, per_class, size, seed })?;
            println!("wrote {} train and {} test images to {} (min keypoints {})", s.train, s.test, out.display(), s.min_keypoints);
        }
        Command::Train { config, resume, epochs, seed, overrides } => {
            let out = commands::cmd_train(&config, &TrainOptions { resume, epochs, seed, overrides })?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("final train top-1: {:.2}", 100.0 * out.train_top1);
        }
        Command::Eval { checkpoint, dataset, split, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let r = commands::cmd_eval(&checkpoint, &dataset, split, out.as_deref())?;
            println!("{}", format_report(&r.report));
        }
        Command::InspectRegions { image, kappa, out, config, overrides } => {
            let cfg = commands::region_settings(config.as_deref(), &overrides, kappa)?;
            let report = commands::cmd_inspect_regions(&image, &cfg, out.as_deref())?;
            if out.is_none() {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
        }
        Command::Visualize { image, kappa, out, secondary, config, overrides } => {
            let cfg = commands::region_settings(config.as_deref(), &overrides, kappa)?;
            let report = commands::cmd_visualize(&image, &cfg, Some(secondary), &out)?;
            println!("drew {} primary boxes and {} keypoints to {}", report.primary.len(), report.keypoints.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
