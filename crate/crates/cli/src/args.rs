use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mg", version, about = "Markov operators from query-key geometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Row-stochastic (or Sinkhorn-balanced) diffusion-map operator.
    Dmap(DmapArgs),
    /// Forward, backward or bistochastic attention operator.
    Attention(AttentionArgs),
    /// Unnormalized kernels and graph Laplacians.
    Kernel(KernelArgs),
    /// One-step Schrodinger bridge between two marginals.
    Bridge(BridgeArgs),
    /// EQ / NESS / NE classification of an operator with marginals.
    Classify(ClassifyArgs),
    /// Magnetic diffusion operator, its currents and Hermitian spectrum.
    Magnetic(MagneticArgs),
    /// Diffusion-map embedding.
    Embed(EmbedArgs),
    /// Run every identity check and report pass/fail per criterion.
    Verify(VerifyArgs),
}

/// Inverse temperature, either a positive number or `auto`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Auto,
    Value(f64),
}

impl FromStr for Beta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Beta::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(Beta::Value(v)),
            _ => Err(format!("beta must be a positive number or 'auto', got {s:?}")),
        }
    }
}

impl Serialize for Beta {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            Beta::Auto => s.serialize_str("auto"),
            Beta::Value(v) => s.serialize_f64(v),
        }
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("expected a nonnegative number, got {s:?}")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct CloudArgs {
    /// Point cloud CSV, one sample per row.
    #[arg(long)]
    pub input: PathBuf,
    /// Interaction matrix W (D x D). Identity when omitted.
    #[arg(long, conflicts_with_all = ["query", "key"])]
    pub weights: Option<PathBuf>,
    /// Query factor W_Q (D x r); requires --key. W = W_Q W_K^T.
    #[arg(long, requires = "key")]
    pub query: Option<PathBuf>,
    /// Key factor W_K (D x r); requires --query.
    #[arg(long, requires = "query")]
    pub key: Option<PathBuf>,
    /// Inverse temperature, or `auto` for 1 / median off-diagonal D^2.
    #[arg(long, default_value = "auto")]
    pub beta: Beta,
    /// Skip the first line of every input CSV.
    #[arg(long)]
    pub skip_header: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = markov_geometry::normalize::DEFAULT_TOL, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = markov_geometry::normalize::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Primary output CSV; secondary outputs go next to it as
    /// `<stem>.<name>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Row,
    Bistochastic,
}

#[derive(Debug, Clone, Args)]
pub struct DmapArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    #[arg(long, value_enum, default_value = "row")]
    pub normalization: Normalization,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Fwd,
    Bwd,
    Bistochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Fwd,
    Bwd,
}

#[derive(Debug, Clone, Args)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    #[arg(long, value_enum, default_value = "fwd")]
    pub variant: AttentionVariant,
    /// Divergence balanced by the bistochastic variant.
    #[arg(long, value_enum, default_value = "fwd")]
    pub direction: Side,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelVariant {
    Rbf,
    Fwd,
    Bwd,
}

#[derive(Debug, Clone, Args)]
pub struct KernelArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    #[arg(long, value_enum, default_value = "rbf")]
    pub variant: KernelVariant,
    /// Also write the combinatorial and random-walk Laplacians of the RBF
    /// kernel.
    #[arg(long)]
    pub laplacians: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeKernel {
    Rbf,
    Attention,
}

/// A marginal file, or `stationary` for the kernel's own stationary law.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalSource {
    Stationary,
    File(PathBuf),
}

impl FromStr for MarginalSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "stationary" {
            Ok(MarginalSource::Stationary)
        } else {
            Ok(MarginalSource::File(PathBuf::from(s)))
        }
    }
}

impl MarginalSource {
    pub fn describe(&self) -> String {
        match self {
            MarginalSource::Stationary => "stationary".into(),
            MarginalSource::File(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BridgeArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    #[arg(long, value_enum, default_value = "rbf")]
    pub kernel: BridgeKernel,
    /// Source marginal: CSV path or `stationary`.
    #[arg(long)]
    pub mu_plus: MarginalSource,
    /// Target marginal: CSV path or `stationary`.
    #[arg(long)]
    pub mu_minus: MarginalSource,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    /// Row-stochastic operator CSV.
    #[arg(long)]
    pub operator: PathBuf,
    /// Source marginal: CSV path or `stationary` (power iteration).
    #[arg(long)]
    pub mu_plus: MarginalSource,
    /// Target marginal: CSV path or `stationary`.
    #[arg(long)]
    pub mu_minus: MarginalSource,
    #[arg(long)]
    pub skip_header: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Gauge {
    /// Phases from the antisymmetric part of the generalized Gram matrix.
    Qk,
    /// Phases from the log-flux of forward attention at its stationary law.
    Attention,
}

#[derive(Debug, Clone, Args)]
pub struct MagneticArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    #[arg(long, value_enum, default_value = "qk")]
    pub gauge: Gauge,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    /// Diffusion time.
    #[arg(long, default_value_t = 1.0, value_parser = nonnegative)]
    pub t: f64,
    /// Number of nontrivial coordinates.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub cloud: CloudArgs,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}
