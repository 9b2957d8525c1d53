use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Message-passing pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Every process sends its E-step result to every other process and
    /// runs the M step itself.
    NaiveAllpairs,
    /// Manager waits for all workers before each M step.
    Synchronous,
    /// Manager runs the M step once a γ-fraction of fresh results is in.
    #[default]
    Asynchronous,
}

/// Who decides the order in which workers finish.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Threads and wall-clock arrival order.
    Real,
    /// Single-threaded; a seeded permutation per iteration fixes who finishes
    /// first.
    #[default]
    Deterministic,
    /// Single-threaded; workers `0..N` always finish first.
    ForcedSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Socket,
}

/// What a worker does with an E step still running when a newer parameter
/// arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InFlightPolicy {
    /// Drop the running E step and restart at the newest parameter. Every
    /// accepted result is then anchored at the parameter of the iteration
    /// it is accepted in.
    #[default]
    AbortAndRestart,
    /// Finish and send the result. The manager caches it and counts it
    /// toward the iteration that is open when it arrives.
    FinishAndSend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub k: usize,
    pub gamma: f64,
    /// Absolute change in log-likelihood that counts as converged. Zero
    /// runs until `max_iter`.
    pub tol: f64,
    pub max_iter: u64,
    pub seed: u64,
    pub scheme: Scheme,
    pub scheduler: Scheduler,
    pub transport: TransportKind,
    pub in_flight: InFlightPolicy,
    /// Evaluate the full-data log-likelihood at every θ_t by a
    /// broadcast-and-collect round instead of summing cached values.
    pub exact_loglik_check: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 1,
            gamma: 1.0,
            tol: 1e-7,
            max_iter: 1000,
            seed: 0,
            scheme: Scheme::Asynchronous,
            scheduler: Scheduler::Deterministic,
            transport: TransportKind::InProcess,
            in_flight: InFlightPolicy::AbortAndRestart,
            exact_loglik_check: false,
        }
    }
}

impl RunConfig {
    pub fn dem(k: usize, gamma: f64) -> Self {
        RunConfig {
            k,
            gamma,
            ..Default::default()
        }
    }

    /// Incremental EM: one fresh subset per M step.
    pub fn iem(k: usize) -> Self {
        Self::dem(k, 1.0 / k as f64)
    }

    /// `N = ⌈γK⌉`, the number of fresh results that triggers an M step.
    pub fn threshold(&self) -> usize {
        let n = (self.gamma * self.k as f64 - 1e-9).ceil();
        (n.max(1.0) as usize).min(self.k.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma = {} is not in (0, 1]", self.gamma)));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::Config(format!("tol = {} must be non-negative", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_ceiling() {
        assert_eq!(RunConfig::dem(20, 0.3).threshold(), 6);
        assert_eq!(RunConfig::dem(10, 0.7).threshold(), 7);
        assert_eq!(RunConfig::dem(10, 1.0).threshold(), 10);
        assert_eq!(RunConfig::dem(7, 0.01).threshold(), 1);
        assert_eq!(RunConfig::iem(13).threshold(), 1);
        assert_eq!(RunConfig::dem(3, 2.0 / 3.0).threshold(), 2);
    }

    #[test]
    fn rejects_bad_gamma() {
        assert!(RunConfig::dem(4, 0.0).validate().is_err());
        assert!(RunConfig::dem(4, 1.5).validate().is_err());
        assert!(RunConfig::dem(0, 0.5).validate().is_err());
    }

    #[test]
    fn json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"k": 5, "gamma": 0.5}"#).unwrap();
        assert_eq!(c.k, 5);
        assert_eq!(c.max_iter, 1000);
        assert_eq!(c.in_flight, InFlightPolicy::AbortAndRestart);
    }
}
