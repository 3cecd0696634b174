//! `bsmm`: generate block sparse matrices, run distributed multiplications
//! and sign iterations, and print cost-model tables.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use bsmm::synth::Pattern;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "bsmm",
    version,
    about = "Distributed block sparse matrix multiplication harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic symmetric matrix in BCSR1 format.
    Generate(GenerateArgs),
    /// Multiply two matrices on a simulated process grid and check the result.
    Multiply(MultiplyArgs),
    /// Run the Newton-Schulz sign iteration on a simulated process grid.
    Sign(SignArgs),
    /// Print communication and memory model values as CSV.
    Model(ModelArgs),
    /// Write the per-rank fetch and compute schedule as CSV and verify it.
    ScheduleDump(ScheduleArgs),
}

/// `RxC` process grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

fn parse_grid(s: &str) -> Result<GridSpec, String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected RxC, got {s:?}"))?;
    let rows = r
        .trim()
        .parse()
        .map_err(|e| format!("bad row count {r:?}: {e}"))?;
    let cols = c
        .trim()
        .parse()
        .map_err(|e| format!("bad column count {c:?}: {e}"))?;
    Ok(GridSpec { rows, cols })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    H2o,
    Se,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternArg {
    Banded,
    Random,
    Dense,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Banded => Pattern::Banded,
            PatternArg::Random => Pattern::Random,
            PatternArg::Dense => Pattern::Dense,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Alg {
    Ptp,
    Rma,
}

/// Synthetic matrix description shared by the subcommands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ProfileArgs {
    /// Benchmark profile.
    #[arg(long, value_enum, default_value = "h2o")]
    pub profile: ProfileName,
    /// Number of block rows.
    #[arg(long, default_value_t = 32)]
    pub blocks: usize,
    /// Override the profile's block size.
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Override the profile's target occupancy.
    #[arg(long)]
    pub occupancy: Option<f64>,
    /// Override the profile's sparsity pattern.
    #[arg(long, value_enum)]
    pub pattern: Option<PatternArg>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output BCSR1 file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Grid, engine and filtering options.
#[derive(Debug, Clone, Args, Serialize)]
pub struct EngineArgs {
    /// Process grid as RxC.
    #[arg(long, value_parser = parse_grid, default_value = "2x2")]
    pub grid: GridSpec,
    /// Replication factor of the one-sided engine.
    #[arg(long = "L", default_value_t = 1)]
    pub l: usize,
    #[arg(long, value_enum, default_value = "rma")]
    pub alg: Alg,
    /// Block filtering threshold, used on the fly and after the product.
    #[arg(long, default_value_t = 1e-10)]
    pub threshold: f64,
    /// Multiply every block pair regardless of norms.
    #[arg(long)]
    pub no_on_the_fly: bool,
    /// Keep result blocks below the threshold.
    #[arg(long)]
    pub no_post_filter: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct MultiplyArgs {
    /// Left operand (BCSR1). Generated from the profile when absent.
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Right operand (BCSR1). Defaults to a second generated matrix.
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Seed for generated operands and the block distribution.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Largest accepted relative Frobenius difference from the serial oracle.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Write the result matrix (BCSR1).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Write per-transfer trace CSV.
    #[arg(long)]
    #[serde(skip)]
    pub trace: Option<PathBuf>,
    /// Write the JSON run report.
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SignArgs {
    /// Input matrix (BCSR1). Generated from the profile when absent.
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    /// Stop once the relative increment drops to this value.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Use the input as is instead of dividing it by its Frobenius norm.
    #[arg(long)]
    pub no_scale: bool,
    /// Write the per-iteration log as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub csv: Option<PathBuf>,
    /// Write the result matrix (BCSR1).
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_parser = parse_grid)]
    pub grid: GridSpec,
    /// Replication factors to tabulate; `L = 1` is always included.
    #[arg(long = "L", num_args = 1.., default_values_t = [1usize])]
    pub l: Vec<usize>,
    /// Derive transfer sizes from a dense matrix on this grid (the default).
    #[arg(long, conflicts_with = "sizes")]
    pub dense: bool,
    /// Dimension of the dense matrix, in f64 elements per side.
    #[arg(long, default_value_t = 10_000, conflicts_with = "sizes")]
    pub n: usize,
    /// Explicit mean transfer sizes in bytes as S_A,S_B,S_C.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<f64>>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long, value_parser = parse_grid)]
    pub grid: GridSpec,
    #[arg(long = "L", default_value_t = 1)]
    pub l: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Multiply(a) => commands::multiply(a),
        Command::Sign(a) => commands::sign(a),
        Command::Model(a) => commands::model(a),
        Command::ScheduleDump(a) => commands::schedule_dump(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
