//! `mgt`: train, edit, sweep and benchmark from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;

use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgt_core::consolidation::SmoothSpec;

#[derive(Debug, Parser)]
#[command(name = "mgt", version, about = "Toy masked generative transformer image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the synthetic editing task.
    Train(TrainArgs),
    /// Edit an image with a trained checkpoint.
    Edit(EditArgs),
    /// Edit once per threshold and report the distance to the source.
    SweepLambda(SweepArgs),
    /// Time the smoothing kernels after checking them against references.
    FilterBench(BenchArgs),
    /// Write one synthetic source image and print its instruction.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    /// Token grid side.
    #[arg(long, default_value_t = 16)]
    grid: usize,
    /// Pixels per patch side.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    patch: u32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data_seed: u64,
    /// Number of synthetic samples to train on.
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    /// Seed for initialization, masking and batching; defaults to the data seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "sgd", value_parser = ["sgd", "adam"])]
    optimizer: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Weight of the attention localization term (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    localization_weight: f64,
    /// Share of examples masked exactly on their edit region.
    #[arg(long, default_value_t = 0.0)]
    region_mask_fraction: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HoldArgs {
    /// Region-hold threshold in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Half-open layer range `a..b` used for localization.
    #[arg(long, value_parser = parse_range)]
    hold_layers: Option<Range<usize>>,
    /// Smoothing as `method:strength`.
    #[arg(long, value_parser = parse_smooth)]
    smooth: Option<SmoothSpec>,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long)]
    seed: u64,
    /// PGM mask; patches with any pixel >= 128 are editable.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    hold: HoldArgs,
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-step attention maps (MGTA and PGM).
    #[arg(long)]
    dump_attn: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    seed: u64,
    /// Thresholds as `start..end:count`, endpoints included.
    #[arg(long, value_parser = parse_grid)]
    grid: LambdaGrid,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, value_parser = parse_range)]
    hold_layers: Option<Range<usize>>,
    #[arg(long, value_parser = parse_smooth)]
    smooth: Option<SmoothSpec>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// A smoothing method, or `all`.
    #[arg(long, default_value = "all", value_parser = parse_method)]
    method: String,
    /// Filter strength.
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    /// Odd upsampling factor for the interpolators.
    #[arg(long, default_value_t = 3)]
    factor: u32,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    size: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    data_seed: u64,
    #[arg(long, default_value_t = 0)]
    index: u64,
    #[arg(long, default_value_t = 16)]
    grid: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    patch: u32,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ground-truth target image.
    #[arg(long)]
    target: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: usize = a.parse().map_err(|_| format!("bad range start {a:?}"))?;
    let b: usize = b.parse().map_err(|_| format!("bad range end {b:?}"))?;
    if a >= b {
        return Err(format!("empty range {s}"));
    }
    Ok(a..b)
}

fn parse_smooth(s: &str) -> Result<SmoothSpec, String> {
    s.parse().map_err(|e: mgt_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<String, String> {
    if s == "all" || s.parse::<mgt_core::consolidation::SmoothMethod>().is_ok() {
        Ok(s.to_string())
    } else {
        Err(format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone)]
struct LambdaGrid(Vec<f64>);

/// Parses `start..end:count` into `count >= 2` evenly spaced values.
fn parse_grid(s: &str) -> Result<LambdaGrid, String> {
    let (range, count) = s.rsplit_once(':').ok_or_else(|| format!("expected start..end:count, got {s:?}"))?;
    let (a, b) = range.split_once("..").ok_or_else(|| format!("expected start..end, got {range:?}"))?;
    let a: f64 = a.parse().map_err(|_| format!("bad start {a:?}"))?;
    let b: f64 = b.parse().map_err(|_| format!("bad end {b:?}"))?;
    let n: usize = count.parse().map_err(|_| format!("bad count {count:?}"))?;
    if n < 2 {
        return Err(format!("grid needs at least 2 points, got {n}"));
    }
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
        return Err(format!("grid must satisfy 0 <= start <= end <= 1, got {a}..{b}"));
    }
    Ok(LambdaGrid((0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()))
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Edit(a) => commands::edit(a),
        Command::SweepLambda(a) => commands::sweep_lambda(a),
        Command::FilterBench(a) => commands::filter_bench(a),
        Command::Sample(a) => commands::sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
