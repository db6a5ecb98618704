//! Command-line experiments: simulate data, identify models, predict,
//! benchmark estimators, select model order and scan free-energy landscapes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dem::order::SATURATION_THRESHOLD;
use dem::simkit::{DEFAULT_DT, DEFAULT_STEPS};

pub mod commands;
pub mod config;
pub mod error;
pub mod fit;
pub mod manifest;

pub use error::{CliError, Result};
pub use fit::Method;

#[derive(Debug, Parser)]
#[command(name = "dem", version, about = "Dynamic expectation maximization for LTI system identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic quadrotor dataset.
    Simulate(SimulateArgs),
    /// Fit a model on the training split of a dataset.
    Identify(IdentifyArgs),
    /// Predict the test split with a fitted model.
    Predict(PredictArgs),
    /// Compare estimators over seeds of synthetic data.
    Benchmark(BenchmarkArgs),
    /// Select the state dimension by sweeping model orders.
    Order(OrderArgs),
    /// Scan the free energy action over a scalar (A, B) grid.
    Landscape(LandscapeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// System 1 to 4, or `toy`.
    #[arg(long)]
    pub system: String,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    /// Noise smoothness in sample intervals; 0 gives white noise.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_mult: f64,
    /// Log-precision of the output noise.
    #[arg(long, default_value_t = 20.0)]
    pub lambda_z: f64,
    /// Log-precision of the process noise.
    #[arg(long, default_value_t = 8.0)]
    pub lambda_w: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Dem)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Result file written by `identify`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 150)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[arg(long, default_value = "2")]
    pub system: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_mult: f64,
    #[arg(long, default_value_t = 20.0)]
    pub lambda_z: f64,
    #[arg(long, default_value_t = 8.0)]
    pub lambda_w: f64,
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    /// Prediction horizon.
    #[arg(long, default_value_t = 150)]
    pub steps: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON table; a CSV copy is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OrderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub max_order: usize,
    #[arg(long, default_value_t = SATURATION_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub a_min: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub a_max: f64,
    #[arg(long, default_value_t = 41)]
    pub a_steps: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub b_min: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub b_max: f64,
    #[arg(long, default_value_t = 41)]
    pub b_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Identify(a) => commands::identify(a),
        Command::Predict(a) => commands::predict_cmd(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Order(a) => commands::order(a),
        Command::Landscape(a) => commands::landscape(a),
    }
}
