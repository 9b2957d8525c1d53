use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Frames exchanged during a run, by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub broadcasts: u64,
    /// E-step results received by the manager, including discarded ones.
    pub results: u64,
    /// Results discarded because a newer parameter had been broadcast.
    pub discarded: u64,
    /// Peer-to-peer payloads of the all-pairs scheme.
    pub peer_payloads: u64,
    pub loglik_requests: u64,
}

/// One M step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// `t ≥ 1`; the M step producing `θ_t`.
    pub iteration: u64,
    /// `θ_t`, flattened by the model's parameter encoding.
    pub theta: Vec<f64>,
    /// Full-data log-likelihood at `θ_t` as used by the stopping rule.
    pub loglik: f64,
    /// True when `loglik` sums cached values some of which were computed at
    /// an older parameter.
    pub loglik_stale: bool,
    /// Workers whose results were accepted since the previous M step (`U_t`).
    pub accepted: Vec<usize>,
    /// Per-subset anchor tag of the cache the M step used; tag `s` refers to
    /// `θ_s` (`θ_0` is the starting point).
    pub anchors: Vec<u64>,
    /// Per-worker iterations since the last accepted message.
    pub staleness: Vec<u64>,
    /// Seconds since the start of the run.
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub algorithm: String,
    pub k: usize,
    pub gamma: f64,
    /// `N = ⌈γK⌉`.
    pub threshold: usize,
    pub scheduler: String,
    pub transport: String,
    pub in_flight: String,
    pub theta0: Vec<f64>,
    /// Full-data log-likelihood at `θ_0`.
    pub loglik0: f64,
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
    pub hit_max_iter: bool,
    pub max_staleness: u64,
    pub messages: MessageCounts,
    pub elapsed_secs: f64,
    /// Exact full-data log-likelihood at the returned parameter.
    pub final_loglik: f64,
    /// Iterations at which the exact log-likelihood decreased (beyond
    /// `1e-9` slack) although every cached result was fresh.
    pub ascent_violations: Vec<u64>,
}

impl Trace {
    pub fn new(algorithm: impl Into<String>, theta0: Vec<f64>) -> Self {
        Trace {
            algorithm: algorithm.into(),
            k: 1,
            gamma: 1.0,
            threshold: 1,
            scheduler: String::new(),
            transport: String::new(),
            in_flight: String::new(),
            theta0,
            loglik0: f64::NAN,
            entries: Vec::new(),
            converged: false,
            hit_max_iter: false,
            max_staleness: 0,
            messages: MessageCounts::default(),
            elapsed_secs: 0.0,
            final_loglik: f64::NAN,
            ascent_violations: Vec::new(),
        }
    }

    /// Number of M steps.
    pub fn iterations(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn final_theta(&self) -> &[f64] {
        self.entries.last().map_or(&self.theta0, |e| &e.theta)
    }

    pub fn logliks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loglik).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
