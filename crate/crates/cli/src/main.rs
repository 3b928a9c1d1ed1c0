//! `subitize` command-line front end.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "subitize", version, about = "Salient object subitizing toolkit")]
pub struct Cli {
    /// Base seed for every random draw; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory or file, depending on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Style {
    Primary,
    Shifted,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a procedural cutout/background library (`--out DIR`).
    MakeLibrary {
        #[arg(long, default_value_t = 40)]
        cutouts: usize,
        #[arg(long, default_value_t = 120)]
        backgrounds: usize,
        #[arg(long, value_enum, default_value_t = Style::Primary)]
        style: Style,
    },
    /// Keep images with a 4-of-5 consensus label (`--out DIR`).
    Consolidate {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Seeded train/test split of a manifest (`--out DIR`).
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Overrides `split.train_fraction`.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Generate a synthetic corpus from a library (`--out DIR`).
    Synth {
        /// `library.csv` or the directory holding it.
        #[arg(long)]
        lib: PathBuf,
        #[arg(long)]
        per_class: usize,
        /// Skip the background-only class `0`.
        #[arg(long)]
        no_backgrounds: bool,
    },
    /// Train a count classifier (`--out model.subt`).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.total_iters`.
        #[arg(long)]
        iters: Option<u64>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Update only the output layer.
        #[arg(long)]
        freeze_features: bool,
    },
    /// Train on synthetic data, then fine-tune on real data (`--out DIR`).
    TwoStage {
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// Stage-two iterations; defaults to `train.total_iters`.
        #[arg(long)]
        real_iters: Option<u64>,
    },
    /// Per-class AP, mAP and confusion matrix (`--out DIR`).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the chance baseline on the same labels.
        #[arg(long)]
        chance: bool,
    },
    /// Channel novelty against a reference model plus patch montages (`--out DIR`).
    Featviz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Keep the top-N windows per image, N from a count file (`--out FILE`).
    Cue {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        counts: PathBuf,
    },
    /// Precision/recall/F over score thresholds (`--out FILE`).
    Detscore {
        #[arg(long)]
        detections: PathBuf,
    },
    /// Build a retrieval index from embeddings, tags and images (`--out FILE`).
    Index {
        /// JSON lines with `id`, `vector` and `tags`; `id` is an image path
        /// relative to this file.
        #[arg(long)]
        items: PathBuf,
        /// Stores count scores of every item image.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rank index items for a number-object query (`--out FILE` optional).
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value = "sos")]
        method: String,
        /// Recompute count scores from the item images instead of the stored ones.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// nDCG@h of every method on judged queries (`--out FILE`).
    Retbench {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
        /// Flip the sign of this parameter's gradient (the check must fail).
        #[arg(long)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return failure::usage(e),
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(code) => code,
        Err(e) => failure::report(&e),
    }
}
