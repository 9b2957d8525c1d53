//! The all-pairs pattern: every process broadcasts its E-step result to all
//! others and runs the M step on its own copy of the aggregate.

use std::collections::BTreeMap;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::config::RunConfig;
use super::manager::{decode_stats_frame, estep_frame};
use super::trace::{Trace, TraceEntry};
use super::wire::{Frame, Kind};
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::model::{aggregate_stats, ConvergenceMonitor, EmModel, SuffStats};

struct Peer<'a, M: EmModel> {
    id: usize,
    subset: &'a M::Subset,
    theta: M::Params,
    inbox: Receiver<Frame>,
    own: Option<SuffStats<M::Stats>>,
}

/// One exchange round at the peers' common parameter `tag`. Returns the
/// full-data log-likelihood and each peer's cache.
fn exchange<M: EmModel>(
    model: &M,
    peers: &mut [Peer<'_, M>],
    outboxes: &[Sender<Frame>],
    tag: u64,
    trace: &mut Trace,
) -> Result<Vec<BTreeMap<usize, SuffStats<M::Stats>>>> {
    let k = peers.len();
    for p in peers.iter_mut() {
        let frame = estep_frame(model, p.subset, p.id, tag, &p.theta);
        if frame.kind == Kind::Failure {
            return Err(Error::WorkerFailed {
                subset: p.id,
                reason: frame.failure_reason(),
            });
        }
        for (j, out) in outboxes.iter().enumerate() {
            if j != p.id {
                let mut f = frame.clone();
                f.kind = Kind::PeerStats;
                out.send(f)
                    .map_err(|_| Error::Protocol(format!("peer {j} hung up")))?;
                trace.messages.peer_payloads += 1;
            }
        }
        let mut own = frame;
        own.kind = Kind::Stats;
        p.own = Some(decode_stats_frame(model, &own)?);
    }
    let mut caches = Vec::with_capacity(k);
    for p in peers.iter_mut() {
        let mut cache = BTreeMap::new();
        cache.insert(p.id, p.own.take().expect("own result computed"));
        for _ in 1..k {
            let f = p
                .inbox
                .recv()
                .map_err(|_| Error::Protocol("peer link closed".into()))?;
            if f.kind != Kind::PeerStats || f.iteration != tag {
                return Err(Error::Protocol(format!(
                    "peer {} got {:?} for iteration {} during round {tag}",
                    p.id, f.kind, f.iteration
                )));
            }
            let s = decode_stats_frame(model, &f)?;
            cache.insert(s.subset_id, s);
        }
        caches.push(cache);
    }
    Ok(caches)
}

fn cache_loglik<S>(cache: &BTreeMap<usize, SuffStats<S>>) -> f64 {
    let mut total = ExactSum::new();
    for c in cache.values() {
        total.merge(&c.loglik);
    }
    total.value()
}

pub(crate) fn run_allpairs<M: EmModel>(
    config: &RunConfig,
    model: &M,
    subsets: &[M::Subset],
    theta0: &M::Params,
) -> Result<(M::Params, Trace)> {
    let start = Instant::now();
    let k = config.k;
    let (outboxes, inboxes): (Vec<_>, Vec<_>) = (0..k).map(|_| unbounded()).unzip();
    let mut peers: Vec<Peer<'_, M>> = subsets
        .iter()
        .zip(inboxes)
        .enumerate()
        .map(|(id, (subset, inbox))| Peer {
            id,
            subset,
            theta: theta0.clone(),
            inbox,
            own: None,
        })
        .collect();

    let mut trace = Trace::new("allpairs", model.encode_params(theta0));
    trace.k = k;
    trace.gamma = 1.0;
    trace.threshold = k;
    trace.scheduler = "Deterministic".into();
    trace.transport = "InProcess".into();
    let mut monitor = ConvergenceMonitor::new(config.tol, config.max_iter);

    let mut tag = 0u64;
    let mut caches = exchange(model, &mut peers, &outboxes, tag, &mut trace)?;
    trace.loglik0 = cache_loglik(&caches[0]);
    monitor.observe(0, trace.loglik0);
    loop {
        let mut next: Vec<M::Params> = Vec::with_capacity(k);
        for (p, cache) in peers.iter().zip(&caches) {
            let agg = aggregate_stats(cache, k)?;
            match model.cm_steps(&agg.payload, &p.theta) {
                Ok(t) if model.params_finite(&t) => next.push(t),
                Ok(_) | Err(Error::Domain { .. }) => {
                    return Err(Error::Diverged {
                        iteration: tag + 1,
                        trace: Box::new(trace),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let reference = model.encode_params(&next[0]);
        for (j, t) in next.iter().enumerate().skip(1) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(&model.encode_params(t)) != bits(&reference) {
                return Err(Error::Protocol(format!(
                    "peer {j} computed a different parameter than peer 0 at iteration {}",
                    tag + 1
                )));
            }
        }
        for (p, t) in peers.iter_mut().zip(next) {
            p.theta = t;
        }
        tag += 1;
        caches = exchange(model, &mut peers, &outboxes, tag, &mut trace)?;
        let ll = cache_loglik(&caches[0]);
        trace.entries.push(TraceEntry {
            iteration: tag,
            theta: reference,
            loglik: ll,
            loglik_stale: false,
            accepted: (0..k).collect(),
            anchors: vec![tag - 1; k],
            staleness: vec![0; k],
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        let status = monitor.observe(tag, ll);
        if status.is_done() {
            trace.converged = status.converged();
            trace.hit_max_iter = status.hit_max_iter();
            trace.final_loglik = ll;
            break;
        }
    }
    trace.elapsed_secs = start.elapsed().as_secs_f64();
    Ok((peers.swap_remove(0).theta, trace))
}
