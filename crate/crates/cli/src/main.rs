//! `otgmm`: identified sets and bootstrap tests for moment models whose data
//! are observed only through their marginals.

mod commands;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const EXIT_ACCEPT: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_REJECT: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
        }
    }
    pub fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
        }
    }
}

impl From<otgmm_core::Error> for CliError {
    fn from(e: otgmm_core::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "otgmm",
    version,
    about = "Sharp identified sets and bootstrap tests from marginal data"
)]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, env = "OTGMM_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Solve one entropic transport problem.
    Sinkhorn(SinkhornArgs),
    /// Bootstrap test of H0: theta0 is in the identified set.
    Test(TestArgs),
    /// Estimate the identified set on a grid.
    Idset(IdsetArgs),
    /// Confidence region by test inversion on a grid.
    Region(RegionArgs),
    /// Componentwise slope bounds for the two-period logit panel.
    LogitSlope(SlopeArgs),
    /// Average marginal effect bounds over the slope set.
    Ame(AmeArgs),
    /// Monte Carlo coverage study on the simulated logit panel.
    Mc(McArgs),
    /// Directional objective curves on a simulated two-arm trial.
    RctDemo(RctArgs),
    /// Write one simulated logit panel as CSV files.
    SimulatePanel(SimulateArgs),
    /// Re-run a command from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SinkhornArgs {
    /// Cost matrix with a header row.
    #[arg(long)]
    pub cost: PathBuf,
    /// Row weights, one column.
    #[arg(long)]
    pub mu: PathBuf,
    /// Column weights, one column.
    #[arg(long)]
    pub nu: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Skip epsilon annealing.
    #[arg(long)]
    pub no_scaling: bool,
    #[arg(long)]
    pub coupling_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// benefit_share, panel_logit or zero. Defaults to panel_logit with
    /// --panel and benefit_share otherwise.
    #[arg(long)]
    pub model: Option<String>,
    /// Sample of the first marginal (header row, one column per coordinate).
    #[arg(long, conflicts_with = "panel")]
    pub mu: Option<PathBuf>,
    /// Sample of the second marginal.
    #[arg(long, conflicts_with = "panel")]
    pub nu: Option<PathBuf>,
    /// Directory with wave1.csv, retainers.csv and refreshment.csv.
    #[arg(long)]
    pub panel: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SearchArgs {
    /// Direction grid resolution.
    #[arg(long, default_value_t = 21)]
    pub resolution: usize,
    /// Grid search only, without gradient ascent.
    #[arg(long)]
    pub no_refine: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BootArgs {
    #[arg(long, default_value_t = 0.05)]
    pub iota_scale: f64,
    #[arg(long = "bootstrap", default_value_t = 200)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.10)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bias-adjusted statistic.
    #[arg(long)]
    pub adjusted: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub theta0: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[command(flatten)]
    pub boot: BootArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IdsetArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// One `low:high:count` per parameter coordinate.
    #[arg(long, required = true, allow_hyphen_values = true)]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Membership threshold; defaults to `eta_scale * log(n) / sqrt(n)`.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub eta_scale: f64,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RegionArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, required = true, allow_hyphen_values = true)]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[command(flatten)]
    pub boot: BootArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SlopeArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, required = true, allow_hyphen_values = true)]
    pub grid: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AmeArgs {
    #[command(flatten)]
    pub slope: SlopeArgs,
    /// Cap on slope values profiled; 0 keeps every accepted value.
    #[arg(long, default_value_t = 0)]
    pub grid_size: usize,
    /// Period of the effect (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub tau: usize,
    /// Covariate whose effect is bounded (1-based).
    #[arg(long, default_value_t = 1)]
    pub j: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct McArgs {
    /// JSON study configuration; defaults to the bundled desk configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_sims: Option<usize>,
    #[arg(long)]
    pub n_org: Option<usize>,
    #[arg(long)]
    pub n_ref: Option<usize>,
    #[arg(long = "bootstrap")]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces the configured grid: one `low:high:count` per coordinate.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RctArgs {
    /// Units per arm.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mu0: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub mu1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(
        long,
        value_delimiter = ',',
        allow_negative_numbers = true,
        default_value = "0.5,0.683,0.85,1"
    )]
    pub thetas: Vec<f64>,
    #[arg(long, default_value_t = 41)]
    pub u_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_org: Option<usize>,
    #[arg(long)]
    pub n_ref: Option<usize>,
    /// Replication index; selects the random stream.
    #[arg(long, default_value_t = 0)]
    pub rep: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_ACCEPT });
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Replay(args) => manifest::replay(&args),
        cmd => manifest::run_recorded(cmd, argv),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
