//! Model-agnostic EM machinery.
//!
//! A model plugs into the engine by implementing [`EmModel`]: a local
//! log-likelihood, a local E step producing additive statistics, the
//! conditional-maximization steps run on the aggregate, and the KL term
//! between two posteriors that enters the free-energy functional
//! `F(p, θ) = Σ_k [ -KL(p_k ‖ h(·|Z_k, θ)) + L_k(θ) ]`.

use std::collections::BTreeMap;
use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::runtime::Trace;

/// Statistics that combine additively across disjoint subsets.
pub trait Additive {
    fn combine(&mut self, other: &Self);
}

/// Output of a local E step: the model payload plus the local
/// log-likelihood at the anchor, accumulated exactly.
#[derive(Debug, Clone)]
pub struct EStep<S> {
    pub stats: S,
    pub loglik: ExactSum,
}

pub trait EmModel: Send + Sync {
    type Params: Clone + Debug + Send + Sync + 'static;
    type Subset: Send + Sync;
    type Stats: Additive + Clone + Debug + Send + 'static;

    /// Local log-likelihood `L_k(θ)` as an exact accumulator.
    fn local_loglik_parts(&self, theta: &Self::Params, subset: &Self::Subset) -> Result<ExactSum>;

    fn local_loglik(&self, theta: &Self::Params, subset: &Self::Subset) -> Result<f64> {
        self.local_loglik_parts(theta, subset).map(|s| s.value())
    }

    fn local_estep(
        &self,
        theta: &Self::Params,
        subset: &Self::Subset,
    ) -> Result<EStep<Self::Stats>>;

    /// Conditional maximization of the Q function reconstructed from
    /// `aggregate`, starting from `current`.
    fn cm_steps(&self, aggregate: &Self::Stats, current: &Self::Params) -> Result<Self::Params>;

    /// `KL(h(·|Z_k, θ_anchor) ‖ h(·|Z_k, θ_eval))` summed over the subset.
    fn local_kl(
        &self,
        theta_eval: &Self::Params,
        theta_anchor: &Self::Params,
        subset: &Self::Subset,
    ) -> Result<f64>;

    fn n_obs(&self, subset: &Self::Subset) -> usize;

    fn params_finite(&self, theta: &Self::Params) -> bool;

    fn encode_params(&self, theta: &Self::Params) -> Vec<f64>;
    fn decode_params(&self, data: &[f64]) -> Result<Self::Params>;
    fn encode_stats(&self, stats: &Self::Stats) -> Vec<f64>;
    fn decode_stats(&self, data: &[f64]) -> Result<Self::Stats>;
}

/// A worker's E-step result as cached by the manager.
#[derive(Debug, Clone)]
pub struct SuffStats<S> {
    pub subset_id: usize,
    /// Iteration index of the parameter the E step was run at.
    pub anchor_tag: u64,
    pub n_obs: usize,
    pub loglik: ExactSum,
    pub payload: S,
}

impl<S> SuffStats<S> {
    pub fn from_estep(subset_id: usize, anchor_tag: u64, n_obs: usize, estep: EStep<S>) -> Self {
        SuffStats {
            subset_id,
            anchor_tag,
            n_obs,
            loglik: estep.loglik,
            payload: estep.stats,
        }
    }

    pub fn local_loglik_at_anchor(&self) -> f64 {
        self.loglik.value()
    }
}

impl<S: Additive> SuffStats<S> {
    /// Combine two results from disjoint subsets. The header keeps the
    /// smaller subset id and the older anchor; use [`aggregate_stats`] when
    /// the per-subset anchors matter.
    pub fn combine(&mut self, other: &SuffStats<S>) {
        self.payload.combine(&other.payload);
        self.loglik.merge(&other.loglik);
        self.n_obs += other.n_obs;
        self.subset_id = self.subset_id.min(other.subset_id);
        self.anchor_tag = self.anchor_tag.min(other.anchor_tag);
    }
}

/// Sum of every cached subset result, with the per-subset anchors kept on
/// the side.
#[derive(Debug, Clone)]
pub struct Aggregate<S> {
    pub payload: S,
    pub n_obs: usize,
    pub loglik: ExactSum,
    /// `(subset_id, anchor_tag)` in subset order.
    pub anchors: Vec<(usize, u64)>,
}

impl<S> Aggregate<S> {
    /// Sum of the cached local log-likelihoods (each at its own anchor).
    pub fn loglik(&self) -> f64 {
        self.loglik.value()
    }
}

/// Combine a full cache (one entry per subset id `0..k`).
pub fn aggregate_stats<S: Additive + Clone>(
    cache: &BTreeMap<usize, SuffStats<S>>,
    k: usize,
) -> Result<Aggregate<S>> {
    if cache.len() != k || cache.keys().enumerate().any(|(i, &id)| i != id) {
        let missing: Vec<usize> = (0..k).filter(|id| !cache.contains_key(id)).collect();
        return Err(Error::Protocol(format!(
            "aggregate needs one result for each of {k} subsets; missing {missing:?}, have {:?}",
            cache.keys().collect::<Vec<_>>()
        )));
    }
    let mut iter = cache.values();
    let first = iter
        .next()
        .ok_or_else(|| Error::Protocol("aggregate over an empty cache".into()))?;
    let mut agg = Aggregate {
        payload: first.payload.clone(),
        n_obs: first.n_obs,
        loglik: first.loglik.clone(),
        anchors: vec![(first.subset_id, first.anchor_tag)],
    };
    for s in iter {
        agg.payload.combine(&s.payload);
        agg.n_obs += s.n_obs;
        agg.loglik.merge(&s.loglik);
        agg.anchors.push((s.subset_id, s.anchor_tag));
    }
    Ok(agg)
}

/// Free-energy functional `F(p̃, θ)` with `p̃_k` the posterior at `anchors[k]`.
pub fn evaluate_f<M: EmModel>(
    model: &M,
    theta: &M::Params,
    anchors: &[M::Params],
    subsets: &[M::Subset],
) -> Result<f64> {
    if anchors.len() != subsets.len() {
        return Err(Error::Dimension(format!(
            "{} anchors for {} subsets",
            anchors.len(),
            subsets.len()
        )));
    }
    let mut total = ExactSum::new();
    for (k, (anchor, subset)) in anchors.iter().zip(subsets).enumerate() {
        let kl = model
            .local_kl(theta, anchor, subset)
            .map_err(|e| e.in_subset(k))?;
        let ll = model
            .local_loglik_parts(theta, subset)
            .map_err(|e| e.in_subset(k))?;
        if !kl.is_finite() || !ll.value().is_finite() {
            return Err(Error::Domain {
                subset: Some(k),
                reason: "non-finite KL or log-likelihood term".into(),
            });
        }
        total.add(-kl);
        total.merge(&ll);
    }
    Ok(total.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceStatus {
    Continue,
    Converged,
    MaxIterReached,
    /// Both the tolerance and the iteration cap were hit at the same step.
    ConvergedAtMaxIter,
}

impl ConvergenceStatus {
    pub fn converged(self) -> bool {
        matches!(self, Self::Converged | Self::ConvergedAtMaxIter)
    }

    pub fn hit_max_iter(self) -> bool {
        matches!(self, Self::MaxIterReached | Self::ConvergedAtMaxIter)
    }

    pub fn is_done(self) -> bool {
        self != Self::Continue
    }
}

/// Stops when two successive full-data log-likelihoods differ by less than
/// `tol`, or after `max_iter` iterations.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    pub tol: f64,
    pub max_iter: u64,
    pub history: Vec<(u64, f64)>,
}

impl Default for ConvergenceMonitor {
    fn default() -> Self {
        Self::new(1e-7, 1000)
    }
}

impl ConvergenceMonitor {
    pub fn new(tol: f64, max_iter: u64) -> Self {
        ConvergenceMonitor {
            tol,
            max_iter,
            history: Vec::new(),
        }
    }

    /// Record `loglik` at `iteration` and decide whether to stop.
    pub fn observe(&mut self, iteration: u64, loglik: f64) -> ConvergenceStatus {
        let converged = self
            .history
            .last()
            .is_some_and(|&(_, prev)| (loglik - prev).abs() < self.tol);
        self.history.push((iteration, loglik));
        let capped = iteration >= self.max_iter;
        match (converged, capped) {
            (true, true) => ConvergenceStatus::ConvergedAtMaxIter,
            (true, false) => ConvergenceStatus::Converged,
            (false, true) => ConvergenceStatus::MaxIterReached,
            (false, false) => ConvergenceStatus::Continue,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FViolation {
    pub iteration: u64,
    pub f_before: f64,
    pub f_after: f64,
}

/// F value at every trace entry, `F(p̃_t, θ_t)` with `p̃_t` the cache the M
/// step producing `θ_t` used.
pub fn f_sequence<M: EmModel>(
    trace: &Trace,
    model: &M,
    subsets: &[M::Subset],
) -> Result<Vec<(u64, f64)>> {
    let mut thetas = Vec::with_capacity(trace.entries.len() + 1);
    thetas.push(model.decode_params(&trace.theta0)?);
    for e in &trace.entries {
        thetas.push(model.decode_params(&e.theta)?);
    }
    let mut out = Vec::with_capacity(trace.entries.len());
    for (i, e) in trace.entries.iter().enumerate() {
        if e.anchors.len() != subsets.len() {
            return Err(Error::Dimension(format!(
                "iteration {} has {} anchors for {} subsets",
                e.iteration,
                e.anchors.len(),
                subsets.len()
            )));
        }
        let anchors = e
            .anchors
            .iter()
            .map(|&tag| {
                thetas.get(tag as usize).cloned().ok_or_else(|| {
                    Error::Protocol(format!("anchor tag {tag} not present in trace"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let f = evaluate_f(model, &thetas[i + 1], &anchors, subsets)?;
        out.push((e.iteration, f));
    }
    Ok(out)
}

/// Iterations where F decreased by more than `rel_tol · |F|`.
pub fn check_monotone_f<M: EmModel>(
    trace: &Trace,
    model: &M,
    subsets: &[M::Subset],
    rel_tol: f64,
) -> Result<Vec<FViolation>> {
    let seq = f_sequence(trace, model, subsets)?;
    Ok(seq
        .windows(2)
        .filter_map(|w| {
            let (_, before) = w[0];
            let (iteration, after) = w[1];
            (after < before - rel_tol * before.abs()).then_some(FViolation {
                iteration,
                f_before: before,
                f_after: after,
            })
        })
        .collect())
}
