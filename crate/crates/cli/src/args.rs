//! Flag definitions. Every flag can also be given in a JSON config file
//! (`--config FILE`) whose keys are the flag names with `_` for `-`; flags
//! given on the command line win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "dem", version, about = "Asynchronous distributed EM for linear mixed-effects models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a simulated dataset (or, with --ratings, a synthetic ratings file).
    Simulate(SimulateArgs),
    /// Fit a dataset with ECME, IEM or DEM.
    Fit(FitArgs),
    /// Compare fits against a reference fit.
    Compare(CompareArgs),
    /// Speed-matrix analysis at a converged estimate.
    Diagnose(DiagnoseArgs),
    /// Turn a ratings file into a per-user dataset.
    Ingest(IngestArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateArgs {
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Number of samples (groups) [default: 200].
    #[arg(long)]
    pub m: Option<usize>,
    /// Total number of observations [default: 100·m].
    #[arg(long)]
    pub n: Option<usize>,
    /// Fixed-effect dimension [default: 10].
    #[arg(long)]
    pub p: Option<usize>,
    /// Random-effect dimension, 3 or 6 for the built-in covariance [default: 3].
    #[arg(long)]
    pub q: Option<usize>,
    /// Error variance τ² [default: 1].
    #[arg(long)]
    pub tau2: Option<f64>,
    /// RNG seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write N synthetic ratings records as CSV instead of a dataset.
    #[arg(long, value_name = "N")]
    pub ratings: Option<usize>,
    /// Output path; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset written by `simulate` or `ingest`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ecme0, iem or dem [default: dem].
    #[arg(long)]
    pub algo: Option<String>,
    /// Fraction of workers the manager waits for, dem only [default: 0.7].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Number of workers / subsets, iem and dem [default: 20].
    #[arg(long = "K", alias = "k")]
    #[serde(rename = "k")]
    pub k: Option<usize>,
    /// Convergence tolerance on the log-likelihood change [default: 1e-7].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration cap [default: 1000].
    #[arg(long)]
    pub max_iter: Option<u64>,
    /// Scheduler seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the sample partition [default: the scheduler seed].
    #[arg(long)]
    pub partition_seed: Option<u64>,
    /// real, deterministic or forced-split [default: deterministic].
    #[arg(long)]
    pub scheduler: Option<String>,
    /// Shorthand for --scheduler deterministic.
    #[arg(long)]
    pub deterministic: bool,
    /// in-process or socket [default: in-process].
    #[arg(long)]
    pub transport: Option<String>,
    /// asynchronous, synchronous or naive-allpairs [default: asynchronous].
    #[arg(long)]
    pub scheme: Option<String>,
    /// abort-and-restart or finish-and-send [default: abort-and-restart].
    #[arg(long)]
    pub in_flight: Option<String>,
    /// joint or sequential conditional maximization [default: joint].
    #[arg(long)]
    pub cm_order: Option<String>,
    /// Evaluate the exact log-likelihood every iteration.
    #[arg(long)]
    pub exact_loglik: bool,
    /// Exit 0 even when the iteration cap is reached.
    #[arg(long)]
    pub allow_maxiter: bool,
    /// Output directory for theta.json, trace.json and fit.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Reference fit (directory written by `fit`, or a θ JSON file).
    /// Defaults to the first run.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Fits to compare.
    pub runs: Vec<PathBuf>,
    /// CSV output [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file for the RMSE over all runs.
    #[arg(long)]
    pub rmse_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Converged estimate (fit directory or θ JSON file).
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Number of subsets [default: 10].
    #[arg(long = "K", alias = "k")]
    #[serde(rename = "k")]
    pub k: Option<usize>,
    /// Partition seed [default: 0].
    #[arg(long)]
    pub partition_seed: Option<u64>,
    /// Group A is subsets 0..⌈γK⌉ [default: 0.5].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Explicit group A as comma-separated subset ids (overrides --gamma).
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    /// Tolerance for the eigenvalue bounds [default: 1e-4].
    #[arg(long)]
    pub bound_tol: Option<f64>,
    /// JSON report [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// CSV with header user,movie,rating,timestamp,genres.
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    /// `::`-separated ratings file (user::movie::rating::timestamp).
    #[arg(long, conflicts_with = "ratings", requires = "movies")]
    pub colon_ratings: Option<PathBuf>,
    /// `::`-separated movies file (movie::title::Genre|Genre).
    #[arg(long)]
    pub movies: Option<PathBuf>,
    /// Also write the converted records as CSV.
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
    /// Dataset output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Overlay the flags given on the command line onto the config file.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut base: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let Value::Object(base_map) = &mut base else {
        bail!("config file {} must hold a JSON object", path.display());
    };
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (key, value) in given {
        let unset = match &value {
            Value::Null => true,
            Value::Bool(b) => !b,
            Value::Array(a) => a.is_empty(),
            _ => false,
        };
        if !unset || !base_map.contains_key(&key) {
            base_map.insert(key, value);
        }
    }
    serde_json::from_value(base).with_context(|| format!("invalid setting in {}", path.display()))
}
