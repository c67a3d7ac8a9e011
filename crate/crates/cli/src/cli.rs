//! Command-line surface. Every subcommand writes into `--out`, starting
//! with a `manifest.txt` that can be fed back as `--config` to replay it.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cumamba", version, about = "Selective state-space U-Net for image restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic degradations; writes checkpoints and a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint on a directory of degraded/clean image pairs.
    Eval(EvalArgs),
    /// Restore one image with overlapping tiles.
    Infer(InferArgs),
    /// Time the scans and a quadratic attention reference over a length grid.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite; exits 2 if any entry fails.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` run config; omitted keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Directory holding `degraded/` and `clean/` with matching file names.
    #[arg(long, value_name = "DIR")]
    pub pairs: PathBuf,
    /// Tile overlap in pixels for images larger than the patch; defaults to
    /// a quarter of the patch side.
    #[arg(long)]
    pub overlap: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// PPM (P6) or PNG image.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Tile overlap in pixels; defaults to a quarter of the patch side.
    #[arg(long)]
    pub overlap: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Bench plan in `key = value` form (scan_lengths, attention_lengths,
    /// channels, state, repetitions, warmup, kernels).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seeds the synthetic kernel inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run config whose model section sizes the network check; defaults to
    /// the toy network.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}
