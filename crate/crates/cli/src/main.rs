//! `desnow` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "desnow",
    about = "Snow removal for LiDAR scans: synthetic data, pseudo-labels, baseline filters and a learned range-image segmenter",
    after_help = "Any config key can be overridden as --section.key=value, e.g. --train.lr=0.01 or --net.variant=unet."
)]
pub struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Shorthand for --postprocess.limit_m.
    #[arg(long, global = true)]
    pp_limit_m: Option<f64>,
    /// Shorthand for --postprocess.ground_margin_m.
    #[arg(long, global = true)]
    pp_ground_margin_m: Option<f64>,
    /// Shorthand for --postprocess.threshold.
    #[arg(long, global = true)]
    pp_threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate labelled synthetic scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; scene k uses seed synth.seed + k.
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Export range images (`.rimg`).
    Project {
        /// A scan file or a directory of `.bin` scans.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rule-based snow labels with per-point provenance.
    Pseudolabel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a classical outlier filter.
    Filter {
        name: FilterName,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network on pseudo-labels.
    Train {
        /// Directory of `.bin` scans.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for --train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict snow labels with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted labels against ground truth.
    Eval {
        /// Directory of predicted `.label` files.
        #[arg(long)]
        pred: PathBuf,
        /// Directory holding ground-truth `.label` files with the same names.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one method per scan.
    Bench {
        method: BenchMethod,
        #[arg(long)]
        input: PathBuf,
        /// Required for `net`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FilterName {
    Ror,
    Sor,
    Dror,
    Lior,
    Dlior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMethod {
    Ror,
    Sor,
    Dror,
    Lior,
    Dlior,
    Pseudolabel,
    Net,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Project { .. } => "project",
            Command::Pseudolabel { .. } => "pseudolabel",
            Command::Filter { .. } => "filter",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (args, mut overrides) = match config::split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let stage = cli.command.stage();
    let mut shorthand = vec![
        ("postprocess", "limit_m", cli.pp_limit_m.map(|v| v.to_string())),
        ("postprocess", "ground_margin_m", cli.pp_ground_margin_m.map(|v| v.to_string())),
        ("postprocess", "threshold", cli.pp_threshold.map(|v| v.to_string())),
    ];
    if let Command::Train { epochs, seed, .. } = &cli.command {
        shorthand.push(("train", "epochs", epochs.map(|v| v.to_string())));
        shorthand.push(("train", "seed", seed.map(|v| v.to_string())));
    }
    for (section, key, value) in shorthand {
        if let Some(raw) = value {
            overrides.push(config::Override { section: section.into(), key: key.into(), raw });
        }
    }
    let result = config::load(cli.config.as_deref(), &overrides)
        .and_then(|cfg| commands::run(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in stage `{stage}`: {e:#}");
            ExitCode::FAILURE
        }
    }
}
