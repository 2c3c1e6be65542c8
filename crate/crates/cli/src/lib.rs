//! Command-line wiring for the segmentation toolkit.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "hacseg", version, about = "Endoscopic vessel segmentation toolkit")]
#[command(after_help = config::help_text())]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; 0 draws one from the OS.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Output directory; for `infer`, the output stem.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset statistics: profile.json and profile_table.csv.
    Profile {
        /// Manifest of `image[,mask]` rows.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Pruned training targets, written as `<stem>_mstar.png`.
    Targets {
        /// Manifest (mask column used when present) or a single mask image.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        min_path: Option<usize>,
    },
    /// Corrupted previews with JSON provenance sidecars.
    Augment {
        /// Manifest or a single image.
        #[arg(long = "in")]
        input: PathBuf,
        /// TOML file holding corruption keys; overrides the `[corruption]` section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Stage 1: reconstruction pretraining on corrupted frames.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Stage 2: attention branch on pruned targets.
    TrainAttn {
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-1 checkpoint; a fresh initialisation is used when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Stage 3: U-Net refinement with the attention branch frozen.
    TrainHac {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        attn_ckpt: Option<PathBuf>,
    },
    /// Score predicted probability maps against annotations.
    Eval {
        /// Directory of predictions (`<stem>.png` or `<stem>_phac.png`).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of annotation masks.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of FOV masks; the full frame when absent.
        #[arg(long)]
        fov: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Write `<stem>_pa.png`, `<stem>_pu.png` and `<stem>_phac.png`.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Composite thresholded vessels over the frame.
    Overlay {
        #[arg(long = "in")]
        input: PathBuf,
        /// Probability map PNG.
        #[arg(long)]
        prob: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Training manifest; overrides the stage's `manifest` key.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Train on generated vessel trees.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

fn effective_seed(seed: u64) -> u64 {
    if seed != 0 {
        return seed;
    }
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0),
    );
    h.finish().max(1)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let seed = effective_seed(cli.seed);
    if seed != cli.seed {
        log::info!("seed {seed}");
    }
    let ctx = commands::Context {
        cfg,
        seed,
        out: cli.out,
    };
    commands::dispatch(&ctx, cli.command)
}

