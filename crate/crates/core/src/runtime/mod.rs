//! Distributed execution: one manager, `K` workers each holding a subset.
//!
//! After a seeding round in which every worker reports at `θ_0`, the
//! manager broadcasts `θ_t`, accepts results until `N = ⌈γK⌉` workers have
//! reported, runs the M step on the cache of latest results and repeats.
//! With `γ = 1` this is synchronous distributed EM; with `γ = 1/K` it is
//! incremental EM over subsets.

mod config;
mod deterministic;
mod manager;
mod schedule;
mod scheme;
mod threaded;
mod trace;
pub mod transport;
pub mod wire;

pub use config::{InFlightPolicy, RunConfig, Scheduler, Scheme, TransportKind};
pub use schedule::{deterministic_schedule, forced_split_schedule};
pub use trace::{MessageCounts, Trace, TraceEntry};

use std::time::Instant;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{ConvergenceMonitor, EmModel};

#[derive(Debug, Clone)]
pub struct RunOutput<P> {
    pub theta: P,
    pub trace: Trace,
}

fn check_partition<M: EmModel>(config: &RunConfig, subsets: &[M::Subset]) -> Result<()> {
    config.validate()?;
    if subsets.len() != config.k {
        return Err(Error::Config(format!(
            "K = {} but {} subsets were given",
            config.k,
            subsets.len()
        )));
    }
    Ok(())
}

fn label(config: &RunConfig) -> &'static str {
    if config.k > 1 && config.threshold() == 1 {
        "iem"
    } else {
        "dem"
    }
}

/// Manager/worker DEM run over `subsets` (one per worker).
pub fn run_dem<M: EmModel>(
    config: &RunConfig,
    model: &M,
    subsets: &[M::Subset],
    theta0: &M::Params,
) -> Result<RunOutput<M::Params>> {
    check_partition::<M>(config, subsets)?;
    let algorithm = label(config);
    let (theta, trace) = match config.scheduler {
        Scheduler::Real => threaded::run(config, model, subsets, theta0, algorithm)?,
        Scheduler::Deterministic | Scheduler::ForcedSplit => {
            deterministic::run(config, model, subsets, theta0, algorithm)?
        }
    };
    Ok(RunOutput { theta, trace })
}

/// Non-distributed baseline: full E step, conditional maximizations,
/// repeat. Uses `tol` and `max_iter` from `config`.
pub fn run_ecme0<M: EmModel>(
    config: &RunConfig,
    model: &M,
    data: &M::Subset,
    theta0: &M::Params,
) -> Result<RunOutput<M::Params>> {
    if !(config.tol.is_finite() && config.tol >= 0.0) || config.max_iter == 0 {
        return Err(Error::Config("tol must be non-negative and max_iter at least 1".into()));
    }
    let start = Instant::now();
    let mut trace = Trace::new("ecme0", model.encode_params(theta0));
    trace.scheduler = "None".into();
    trace.transport = "None".into();
    let mut monitor = ConvergenceMonitor::new(config.tol, config.max_iter);
    let mut theta = theta0.clone();
    let mut estep = model.local_estep(&theta, data)?;
    let mut prev = estep.loglik.value();
    trace.loglik0 = prev;
    monitor.observe(0, prev);
    let mut t = 0u64;
    loop {
        let next = match model.cm_steps(&estep.stats, &theta) {
            Ok(p) if model.params_finite(&p) => p,
            Ok(_) | Err(Error::Domain { .. }) => {
                return Err(Error::Diverged {
                    iteration: t + 1,
                    trace: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        t += 1;
        theta = next;
        estep = model.local_estep(&theta, data)?;
        let ll = estep.loglik.value();
        if !ll.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                trace: Box::new(trace),
            });
        }
        if ll < prev - 1e-9 {
            warn!("ECME log-likelihood decreased at iteration {t}: {prev} -> {ll}");
            trace.ascent_violations.push(t);
        }
        trace.entries.push(TraceEntry {
            iteration: t,
            theta: model.encode_params(&theta),
            loglik: ll,
            loglik_stale: false,
            accepted: vec![0],
            anchors: vec![t - 1],
            staleness: vec![0],
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        prev = ll;
        let status = monitor.observe(t, ll);
        if status.is_done() {
            trace.converged = status.converged();
            trace.hit_max_iter = status.hit_max_iter();
            break;
        }
    }
    trace.final_loglik = prev;
    trace.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(RunOutput { theta, trace })
}

/// Run the message pattern selected by `config.scheme`. The synchronous
/// scheme is DEM with `γ = 1`.
pub fn run_scheme<M: EmModel>(
    config: &RunConfig,
    model: &M,
    subsets: &[M::Subset],
    theta0: &M::Params,
) -> Result<RunOutput<M::Params>> {
    check_partition::<M>(config, subsets)?;
    match config.scheme {
        Scheme::NaiveAllpairs => {
            let (theta, trace) = scheme::run_allpairs(config, model, subsets, theta0)?;
            Ok(RunOutput { theta, trace })
        }
        Scheme::Synchronous => {
            let sync = RunConfig {
                gamma: 1.0,
                ..config.clone()
            };
            run_dem(&sync, model, subsets, theta0)
        }
        Scheme::Asynchronous => run_dem(config, model, subsets, theta0),
    }
}
