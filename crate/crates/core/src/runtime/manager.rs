use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use crossbeam_channel::Receiver;
use log::{debug, info, warn};

use super::config::{InFlightPolicy, RunConfig};
use super::trace::{Trace, TraceEntry};
use super::transport::FrameSender;
use super::wire::{Frame, Kind};
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::model::{aggregate_stats, ConvergenceMonitor, EStep, EmModel, SuffStats};

/// Stats frame payload: `[n_obs, loglik accumulator…, model statistics…]`.
fn stats_frame<M: EmModel>(
    model: &M,
    subset: usize,
    tag: u64,
    n_obs: usize,
    estep: &EStep<M::Stats>,
) -> Frame {
    let mut payload = vec![n_obs as f64];
    estep.loglik.encode(&mut payload);
    payload.extend(model.encode_stats(&estep.stats));
    Frame::new(Kind::Stats, subset, tag, payload)
}

pub(crate) fn decode_stats_frame<M: EmModel>(model: &M, frame: &Frame) -> Result<SuffStats<M::Stats>> {
    let bad = || Error::Protocol(format!("malformed stats frame from subset {}", frame.subset_id));
    let (&n_obs, mut rest) = frame.payload.split_first().ok_or_else(bad)?;
    let loglik = ExactSum::decode(&mut rest).ok_or_else(bad)?;
    let payload = model.decode_stats(rest)?;
    Ok(SuffStats {
        subset_id: frame.subset(),
        anchor_tag: frame.iteration,
        n_obs: n_obs as usize,
        loglik,
        payload,
    })
}

pub(crate) fn estep_frame<M: EmModel>(model: &M, subset: &M::Subset, id: usize, tag: u64, theta: &M::Params) -> Frame {
    match model.local_estep(theta, subset) {
        Ok(e) => stats_frame(model, id, tag, model.n_obs(subset), &e),
        Err(e) => Frame::failure(id, tag, &e.to_string()),
    }
}

pub(crate) enum Control {
    Continue,
    Shutdown,
}

/// One logical worker: its subset, its link to the manager, the parameter
/// it is working on and, under finish-and-send, the newest one queued
/// behind it.
pub(crate) struct Worker<'a, M: EmModel> {
    pub id: usize,
    model: &'a M,
    subset: &'a M::Subset,
    out: Box<dyn FrameSender>,
    policy: InFlightPolicy,
    pub busy: Option<(u64, M::Params)>,
    pending: Option<(u64, M::Params)>,
}

impl<'a, M: EmModel> Worker<'a, M> {
    pub fn new(
        id: usize,
        model: &'a M,
        subset: &'a M::Subset,
        out: Box<dyn FrameSender>,
        policy: InFlightPolicy,
    ) -> Self {
        Worker {
            id,
            model,
            subset,
            out,
            policy,
            busy: None,
            pending: None,
        }
    }

    pub fn receive(&mut self, frame: Frame) -> Result<Control> {
        match frame.kind {
            Kind::Broadcast => match self.model.decode_params(&frame.payload) {
                Ok(theta) => {
                    let newer = (frame.iteration, theta);
                    match self.policy {
                        InFlightPolicy::AbortAndRestart => self.busy = Some(newer),
                        InFlightPolicy::FinishAndSend if self.busy.is_none() => {
                            self.busy = Some(newer)
                        }
                        InFlightPolicy::FinishAndSend => self.pending = Some(newer),
                    }
                }
                Err(e) => self.out.send(Frame::failure(self.id, frame.iteration, &e.to_string()))?,
            },
            Kind::LoglikRequest => {
                let reply = self
                    .model
                    .decode_params(&frame.payload)
                    .and_then(|theta| self.model.local_loglik_parts(&theta, self.subset));
                let out = match reply {
                    Ok(ll) => {
                        let mut payload = Vec::new();
                        ll.encode(&mut payload);
                        Frame::new(Kind::LoglikReply, self.id, frame.iteration, payload)
                    }
                    Err(e) => Frame::failure(self.id, frame.iteration, &e.to_string()),
                };
                self.out.send(out)?;
            }
            Kind::Shutdown => return Ok(Control::Shutdown),
            other => {
                return Err(Error::Protocol(format!(
                    "worker {} received a {other:?} frame",
                    self.id
                )))
            }
        }
        Ok(Control::Continue)
    }

    /// Run the E step at the current parameter, if any, without sending.
    pub fn compute(&mut self) -> Option<(u64, Frame)> {
        let (tag, theta) = self.busy.take()?;
        Some((tag, estep_frame(self.model, self.subset, self.id, tag, &theta)))
    }

    /// Send a computed result and move on to the queued parameter.
    pub fn deliver(&mut self, frame: Frame) -> Result<()> {
        self.out.send(frame)?;
        if self.busy.is_none() {
            self.busy = self.pending.take();
        }
        Ok(())
    }

    /// True when a parameter newer than `tag` has arrived.
    pub fn superseded(&self, tag: u64) -> bool {
        self.busy.as_ref().is_some_and(|(t, _)| *t > tag)
    }
}

/// The single writer of the run state: cache, parameter, accept sets,
/// staleness and trace.
pub(crate) struct Manager<'a, M: EmModel> {
    pub model: &'a M,
    pub config: &'a RunConfig,
    pub k: usize,
    pub to_workers: Vec<Box<dyn FrameSender>>,
    pub inbox: Receiver<Frame>,
    pub deferred: VecDeque<Frame>,
    cache: BTreeMap<usize, SuffStats<M::Stats>>,
    pub accepted: BTreeSet<usize>,
    staleness: Vec<u64>,
    pub theta: M::Params,
    pub tag: u64,
    pub trace: Trace,
    start: Instant,
}

impl<'a, M: EmModel> Manager<'a, M> {
    pub fn new(
        model: &'a M,
        config: &'a RunConfig,
        algorithm: &str,
        theta0: M::Params,
        to_workers: Vec<Box<dyn FrameSender>>,
        inbox: Receiver<Frame>,
    ) -> Self {
        let k = config.k;
        let mut trace = Trace::new(algorithm, model.encode_params(&theta0));
        trace.k = k;
        trace.gamma = config.gamma;
        trace.threshold = config.threshold();
        trace.scheduler = format!("{:?}", config.scheduler);
        trace.transport = format!("{:?}", config.transport);
        trace.in_flight = format!("{:?}", config.in_flight);
        Manager {
            model,
            config,
            k,
            to_workers,
            inbox,
            deferred: VecDeque::new(),
            cache: BTreeMap::new(),
            accepted: BTreeSet::new(),
            staleness: vec![0; k],
            theta: theta0,
            tag: 0,
            trace,
            start: Instant::now(),
        }
    }

    pub fn send_to(&mut self, k: usize, frame: Frame) -> Result<()> {
        self.to_workers[k].send(frame)
    }

    /// Send `θ_tag` to every worker, including those that did not report.
    pub fn broadcast(&mut self) -> Result<()> {
        let payload = self.model.encode_params(&self.theta);
        for k in 0..self.k {
            self.to_workers[k].send(Frame::new(Kind::Broadcast, k, self.tag, payload.clone()))?;
        }
        self.trace.messages.broadcasts += self.k as u64;
        Ok(())
    }

    pub fn request_loglik(&mut self) -> Result<()> {
        let payload = self.model.encode_params(&self.theta);
        for k in 0..self.k {
            self.to_workers[k].send(Frame::new(Kind::LoglikRequest, k, self.tag, payload.clone()))?;
        }
        self.trace.messages.loglik_requests += self.k as u64;
        Ok(())
    }

    pub fn shutdown(&mut self) {
        for k in 0..self.k {
            let _ = self.to_workers[k].send(Frame::new(Kind::Shutdown, k, self.tag, Vec::new()));
        }
    }

    pub fn next_frame(&mut self) -> Result<Frame> {
        if let Some(f) = self.deferred.pop_front() {
            return Ok(f);
        }
        self.inbox
            .recv()
            .map_err(|_| Error::Protocol("all worker links closed".into()))
    }

    fn check_failure(frame: &Frame) -> Result<()> {
        if frame.kind == Kind::Failure {
            return Err(Error::WorkerFailed {
                subset: frame.subset(),
                reason: frame.failure_reason(),
            });
        }
        Ok(())
    }

    /// Handle one E-step result; returns whether it entered the cache.
    pub fn handle_result(&mut self, frame: Frame) -> Result<bool> {
        Self::check_failure(&frame)?;
        if frame.kind != Kind::Stats {
            return Err(Error::Protocol(format!(
                "manager expected a stats frame, got {:?}",
                frame.kind
            )));
        }
        let k = frame.subset();
        if k >= self.k {
            return Err(Error::Protocol(format!("stats from unknown subset {k}")));
        }
        self.trace.messages.results += 1;
        let stale = frame.iteration < self.tag;
        let older_than_cache = self
            .cache
            .get(&k)
            .is_some_and(|c| c.anchor_tag > frame.iteration);
        if older_than_cache
            || (stale && self.config.in_flight == InFlightPolicy::AbortAndRestart)
        {
            self.trace.messages.discarded += 1;
            debug!("discarding result of subset {k} anchored at {}", frame.iteration);
            return Ok(false);
        }
        let stats = decode_stats_frame(self.model, &frame)?;
        self.cache.insert(k, stats);
        self.accepted.insert(k);
        Ok(true)
    }

    /// Collect one log-likelihood reply per worker for `θ_tag`, deferring any
    /// E-step results that arrive in between.
    pub fn collect_loglik(&mut self) -> Result<ExactSum> {
        let mut got: BTreeMap<usize, ExactSum> = BTreeMap::new();
        while got.len() < self.k {
            let frame = self
                .inbox
                .recv()
                .map_err(|_| Error::Protocol("all worker links closed".into()))?;
            Self::check_failure(&frame)?;
            match frame.kind {
                Kind::LoglikReply if frame.iteration == self.tag => {
                    let ll = ExactSum::decode(&mut frame.payload.as_slice()).ok_or_else(|| {
                        Error::Protocol("malformed log-likelihood reply".into())
                    })?;
                    got.insert(frame.subset(), ll);
                }
                Kind::LoglikReply => {}
                _ => self.deferred.push_back(frame),
            }
        }
        let mut total = ExactSum::new();
        for ll in got.values() {
            total.merge(ll);
        }
        Ok(total)
    }

    /// Sum of the cached log-likelihoods and whether any is stale.
    pub fn cached_loglik(&self) -> (f64, bool) {
        let mut total = ExactSum::new();
        let mut stale = false;
        for c in self.cache.values() {
            total.merge(&c.loglik);
            stale |= c.anchor_tag != self.tag;
        }
        (total.value(), stale)
    }

    fn diverged(&self, iteration: u64) -> Error {
        let mut trace = self.trace.clone();
        trace.elapsed_secs = self.start.elapsed().as_secs_f64();
        Error::Diverged {
            iteration,
            trace: Box::new(trace),
        }
    }

    /// M step on the full cache; appends the trace entry for the new `θ`.
    pub fn m_step(&mut self) -> Result<()> {
        let agg = aggregate_stats(&self.cache, self.k)?;
        let next = self.tag + 1;
        let theta = match self.model.cm_steps(&agg.payload, &self.theta) {
            Ok(t) if self.model.params_finite(&t) => t,
            Ok(_) | Err(Error::Domain { .. }) => return Err(self.diverged(next)),
            Err(e) => return Err(e),
        };
        for k in 0..self.k {
            if self.accepted.contains(&k) {
                self.staleness[k] = 0;
            } else {
                self.staleness[k] += 1;
            }
        }
        let max_stale = self.staleness.iter().copied().max().unwrap_or(0);
        self.trace.max_staleness = self.trace.max_staleness.max(max_stale);
        self.trace.entries.push(TraceEntry {
            iteration: next,
            theta: self.model.encode_params(&theta),
            loglik: f64::NAN,
            loglik_stale: false,
            accepted: std::mem::take(&mut self.accepted).into_iter().collect(),
            anchors: agg.anchors.iter().map(|&(_, tag)| tag).collect(),
            staleness: self.staleness.clone(),
            elapsed_secs: self.start.elapsed().as_secs_f64(),
        });
        self.theta = theta;
        self.tag = next;
        Ok(())
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

/// How results reach the manager.
pub(crate) trait Gather<M: EmModel> {
    /// Make results flow until the open iteration has `need` accepted
    /// workers.
    fn gather(&mut self, mgr: &mut Manager<'_, M>, need: usize) -> Result<()>;

    /// Exact full-data log-likelihood at `θ_tag`.
    fn exact_loglik(&mut self, mgr: &mut Manager<'_, M>) -> Result<ExactSum>;
}

/// The manager loop shared by every scheduler: seeding round at `θ_0`, then
/// M step, broadcast, gather and convergence check until done.
pub(crate) fn drive<M: EmModel, G: Gather<M>>(
    mgr: &mut Manager<'_, M>,
    driver: &mut G,
) -> Result<()> {
    let config = mgr.config;
    let need = config.threshold();
    let mut monitor = ConvergenceMonitor::new(config.tol, config.max_iter);

    mgr.broadcast()?;
    driver.gather(mgr, mgr.k)?;
    let (l0, _) = mgr.cached_loglik();
    mgr.trace.loglik0 = l0;
    monitor.observe(0, l0);

    let mut exact_last = None;
    let mut prev_exact = Some(l0);
    loop {
        mgr.m_step()?;
        mgr.broadcast()?;
        driver.gather(mgr, need)?;
        let (ll, stale) = if config.exact_loglik_check {
            let v = driver.exact_loglik(mgr)?.value();
            exact_last = Some(v);
            (v, false)
        } else {
            mgr.cached_loglik()
        };
        if !ll.is_finite() {
            return Err(mgr.diverged_at_current());
        }
        let entry = mgr.trace.entries.last_mut().expect("entry pushed by m_step");
        entry.loglik = ll;
        entry.loglik_stale = stale;
        let iteration = entry.iteration;
        let fresh_step = entry.anchors.iter().all(|&a| a + 1 == iteration);
        if let Some(prev) = prev_exact {
            if fresh_step && !stale && ll < prev - 1e-9 {
                warn!("log-likelihood decreased at iteration {iteration}: {prev} -> {ll}");
                mgr.trace.ascent_violations.push(iteration);
            }
        }
        prev_exact = (!stale).then_some(ll);
        let status = monitor.observe(mgr.tag, ll);
        if status.is_done() {
            mgr.trace.converged = status.converged();
            mgr.trace.hit_max_iter = status.hit_max_iter();
            break;
        }
    }

    mgr.trace.final_loglik = match exact_last {
        Some(v) => v,
        None => driver.exact_loglik(mgr)?.value(),
    };
    mgr.trace.elapsed_secs = mgr.elapsed();
    info!(
        "{} finished after {} iterations (converged = {}), loglik = {}",
        mgr.trace.algorithm,
        mgr.trace.iterations(),
        mgr.trace.converged,
        mgr.trace.final_loglik
    );
    Ok(())
}

impl<M: EmModel> Manager<'_, M> {
    fn diverged_at_current(&self) -> Error {
        self.diverged(self.tag)
    }
}
