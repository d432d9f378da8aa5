use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser, Serialize, Deserialize)]
#[command(name = "tbq", version, about = "Random dyadic cubes, ball coverings and Tb diagnostics on finite quasimetric clouds")]
pub struct Cli {
    /// Directory for every output file; relative `--out` paths land here.
    #[arg(long, global = true, env = "TBH_OUT_DIR")]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand, Serialize, Deserialize)]
pub enum Cmd {
    /// Point clouds.
    #[command(subcommand)]
    Space(SpaceCmd),
    /// Deterministic cube systems.
    #[command(subcommand)]
    Dyadic(DyadicCmd),
    /// Monte Carlo estimates.
    #[command(subcommand)]
    Mc(McCmd),
    /// End-to-end Tb diagnostics.
    #[command(subcommand)]
    Tb(TbCmd),
    /// Write a reference instance bundle.
    Corpus(CorpusArgs),
    /// Merge CSV outputs and emit plot series.
    Report(ReportArgs),
    /// Re-run a manifest and compare every output byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand, Serialize, Deserialize)]
pub enum SpaceCmd {
    Gen(GenArgs),
    Validate(ValidateArgs),
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct GenArgs {
    /// grid1d, grid2d_sup, cantor1000, snowflake_half or bergman.
    #[arg(long = "type")]
    pub kind: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize, Deserialize)]
pub enum DyadicCmd {
    Build(BuildArgs),
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct BuildArgs {
    #[arg(long)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.125)]
    pub sep_factor: f64,
    /// christ (close 1/16, loose 4) or reference (close 1/2, loose 1).
    #[arg(long, default_value = "christ")]
    pub rule: String,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where a Monte Carlo command takes its cloud from.
#[derive(Debug, Args, Serialize, Deserialize)]
pub struct Source {
    /// Cloud JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub cloud: Option<PathBuf>,
    /// Corpus preset, used when no cloud file is given.
    #[arg(long, default_value = "grid1d")]
    pub preset: String,
    /// Preset size.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Subcommand, Serialize, Deserialize)]
pub enum McCmd {
    Boundary(BoundaryArgs),
    Badness(BadnessArgs),
    Cover(CoverArgs),
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct BoundaryArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[arg(long)]
    pub k: i32,
    /// Point under test; the middle point by default.
    #[arg(long)]
    pub point: Option<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct BadnessArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 0.25)]
    pub delta: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    pub r: Vec<i32>,
    /// Generation of the fixed cube, taken from the system of `--seed`.
    #[arg(long)]
    pub gen: i32,
    #[arg(long, default_value_t = 0)]
    pub idx: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Dimension entering the goodness exponent.
    #[arg(long, default_value_t = 1.0)]
    pub dim: f64,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct CoverArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub theta: f64,
    #[arg(long)]
    pub upsilon: f64,
    #[arg(long)]
    pub k: i32,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1000)]
    pub pilot_trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize, Deserialize)]
pub enum TbCmd {
    Check(CheckArgs),
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct CheckArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub r: Option<i32>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Dilation of the weak boundedness balls.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub upsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kernel_const: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub r_decay: Option<Vec<i32>>,
    #[arg(long)]
    pub surgery_pairs: Option<usize>,
    #[arg(long)]
    pub no_paraproduct: bool,
    #[arg(long)]
    pub no_separated_bound: bool,
    /// Report JSON; the per-seed CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct CorpusArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// CSV files sharing one header.
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    pub inputs: Vec<PathBuf>,
    /// Merged CSV; the summary and series files take its stem.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
