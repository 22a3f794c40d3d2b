use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "sipml",
    version,
    about = "Semiparametric PML estimation of single-index models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-step fit of a single-index model on a CSV file
    Fit(FitArgs),
    /// Monte Carlo comparison of the four estimators
    Simulate(SimulateArgs),
    /// Goodness-of-fit statistics for a fitted count model
    Gof(GofArgs),
    /// Smoothed link and pointwise bands at new covariate rows
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dgp {
    Table1,
    Table2,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Write the artifact here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// CSV with a header; first column is the response
    pub data: PathBuf,
    /// poisson, negbin, gamma or gaussian-gls
    #[arg(long, default_value = "negbin")]
    pub family: String,
    /// Density trimming threshold c
    #[arg(long)]
    pub trim_c: Option<f64>,
    #[arg(long)]
    pub h_lo: Option<f64>,
    #[arg(long)]
    pub h_hi: Option<f64>,
    /// Number of bandwidths on the search grid
    #[arg(long, default_value_t = sipml::estimation::DEFAULT_H_GRID)]
    pub h_grid: usize,
    /// Trust-region radius around the Step 1 direction
    #[arg(long)]
    pub d_n: Option<f64>,
    /// Step 1 pilot bandwidth (default 3 n^{-1/5})
    #[arg(long)]
    pub pilot_h: Option<f64>,
    /// Lower bound for the nuisance estimate
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accepted for symmetry with `simulate`; fitting is single-threaded
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Center and scale covariates before fitting
    #[arg(long)]
    pub standardize: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Dgp::Table1)]
    pub dgp: Dgp,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Number of replications
    #[arg(long = "r", default_value_t = 100)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Comma-separated subset of GLS-P, GLS-SP, POI-SP, NB-SP
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "GLS-P,GLS-SP,POI-SP,NB-SP"
    )]
    pub estimators: Vec<String>,
    /// Step 1 initialization: true-value or multi-start
    #[arg(long, default_value = "true-value")]
    pub start: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GofArgs {
    /// Artifact written by `sipml fit`
    #[arg(long)]
    pub fit: PathBuf,
    /// Data to evaluate; defaults to the training data stored in the artifact
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated cut points; each closes a cell, the last cell is the open tail
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
    pub cells: Vec<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Artifact written by `sipml fit`
    #[arg(long)]
    pub fit: PathBuf,
    /// CSV of covariate rows with the training covariate header
    pub data: PathBuf,
    /// The input holds index values in a single column instead of covariates
    #[arg(long)]
    pub index: bool,
    /// Coverage of the pointwise bands
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}
