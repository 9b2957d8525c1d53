//! Wall-clock execution: logical workers multiplexed onto a pool of
//! executor threads, results accepted in arrival order.

use std::collections::BTreeMap;
use std::thread;

use crossbeam_channel::{bounded, Receiver, TryRecvError};
use log::warn;

use super::config::{InFlightPolicy, RunConfig};
use super::manager::{drive, Control, Gather, Manager, Worker};
use super::transport::Links;
use super::wire::Frame;
use super::Trace;
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::model::EmModel;

struct Arrivals;

impl<M: EmModel> Gather<M> for Arrivals {
    fn gather(&mut self, mgr: &mut Manager<'_, M>, need: usize) -> Result<()> {
        while mgr.accepted.len() < need {
            let frame = mgr.next_frame()?;
            mgr.handle_result(frame)?;
        }
        Ok(())
    }

    fn exact_loglik(&mut self, mgr: &mut Manager<'_, M>) -> Result<ExactSum> {
        mgr.request_loglik()?;
        mgr.collect_loglik()
    }
}

/// Apply one frame to the worker it addresses.
fn dispatch<M: EmModel>(
    workers: &mut BTreeMap<usize, Worker<'_, M>>,
    frame: Frame,
) -> Result<Control> {
    let k = frame.subset();
    let w = workers
        .get_mut(&k)
        .ok_or_else(|| Error::Protocol(format!("frame for worker {k} reached the wrong executor")))?;
    w.receive(frame)
}

/// Take in everything queued without blocking; `Ok(false)` on shutdown.
fn drain<M: EmModel>(
    workers: &mut BTreeMap<usize, Worker<'_, M>>,
    inbox: &Receiver<Frame>,
) -> Result<bool> {
    loop {
        match inbox.try_recv() {
            Ok(frame) => {
                if let Control::Shutdown = dispatch(workers, frame)? {
                    return Ok(false);
                }
            }
            Err(TryRecvError::Empty) => return Ok(true),
            Err(TryRecvError::Disconnected) => return Ok(false),
        }
    }
}

fn executor<M: EmModel>(
    mut workers: BTreeMap<usize, Worker<'_, M>>,
    inbox: Receiver<Frame>,
    policy: InFlightPolicy,
) -> Result<()> {
    // The worker computed first in a pass is the one least likely to be
    // superseded, so the lead position rotates across passes.
    let mut lead = 0usize;
    loop {
        let has_work = workers.values().any(|w| w.busy.is_some());
        if !has_work {
            let Ok(frame) = inbox.recv() else {
                return Ok(());
            };
            if let Control::Shutdown = dispatch(&mut workers, frame)? {
                return Ok(());
            }
        }
        if !drain(&mut workers, &inbox)? {
            return Ok(());
        }
        let mut ids: Vec<usize> = workers.keys().copied().collect();
        let n = ids.len().max(1);
        ids.rotate_left(lead % n);
        lead = lead.wrapping_add(1);
        for k in ids {
            let Some((tag, frame)) = workers.get_mut(&k).and_then(|w| w.compute()) else {
                continue;
            };
            if !drain(&mut workers, &inbox)? {
                return Ok(());
            }
            let w = workers.get_mut(&k).expect("worker exists");
            if policy == InFlightPolicy::AbortAndRestart && w.superseded(tag) {
                continue;
            }
            w.deliver(frame)?;
        }
    }
}

pub(crate) fn run<M: EmModel>(
    config: &RunConfig,
    model: &M,
    subsets: &[M::Subset],
    theta0: &M::Params,
    algorithm: &str,
) -> Result<(M::Params, Trace)> {
    let k = config.k;
    let pool = thread::available_parallelism().map_or(1, |n| n.get()).min(k);
    let (exec_txs, exec_rxs): (Vec<_>, Vec<_>) = (0..pool).map(|_| bounded(k)).unzip();
    let worker_txs = (0..k).map(|id| exec_txs[id % pool].clone()).collect();
    drop(exec_txs);
    let mut links = Links::connect(config.transport, worker_txs)?;

    let mut groups: Vec<BTreeMap<usize, Worker<'_, M>>> = (0..pool).map(|_| BTreeMap::new()).collect();
    for (id, subset) in subsets.iter().enumerate() {
        let out = links.take_worker_sender(id)?;
        groups[id % pool].insert(id, Worker::new(id, model, subset, out, config.in_flight));
    }
    let to_workers = std::mem::take(&mut links.to_workers);
    let inbox = links.manager_inbox.clone();

    thread::scope(|scope| {
        let handles: Vec<_> = groups
            .into_iter()
            .zip(exec_rxs)
            .enumerate()
            .map(|(e, (group, rx))| {
                thread::Builder::new()
                    .name(format!("dem-executor-{e}"))
                    .spawn_scoped(scope, move || executor(group, rx, config.in_flight))
                    .expect("spawn executor thread")
            })
            .collect();

        let mut mgr = Manager::new(model, config, algorithm, theta0.clone(), to_workers, inbox);
        let result = drive(&mut mgr, &mut Arrivals).map(|()| (mgr.theta.clone(), mgr.trace.clone()));
        mgr.shutdown();
        drop(mgr);
        for h in handles {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => warn!("executor stopped with an error: {e}"),
                Err(_) => warn!("executor thread panicked"),
            }
        }
        drop(links);
        result
    })
}
