//! Single-threaded execution with a seeded completion order.
//!
//! Every send is matched by an immediate blocking receive on the other end,
//! so the sequence of events does not depend on thread timing and the
//! socket transport yields the same trace as the in-process one.

use crossbeam_channel::{bounded, Receiver};

use super::config::{RunConfig, Scheduler};
use super::manager::{Control, Gather, Manager, Worker};
use super::schedule::{deterministic_schedule, forced_split_schedule};
use super::transport::Links;
use super::wire::Frame;
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::model::EmModel;

struct Lockstep<'a, M: EmModel> {
    workers: Vec<Worker<'a, M>>,
    inboxes: Vec<Receiver<Frame>>,
    seed: u64,
    forced: bool,
}

impl<M: EmModel> Lockstep<'_, M> {
    fn deliver_to_worker(&mut self, k: usize) -> Result<()> {
        let frame = self.inboxes[k]
            .recv()
            .map_err(|_| Error::Protocol(format!("link to worker {k} closed")))?;
        match self.workers[k].receive(frame)? {
            Control::Continue => Ok(()),
            Control::Shutdown => Err(Error::Protocol(format!("worker {k} shut down early"))),
        }
    }
}

impl<'a, M: EmModel> Gather<M> for Lockstep<'a, M> {
    fn gather(&mut self, mgr: &mut Manager<'_, M>, need: usize) -> Result<()> {
        // Every worker takes in the broadcast that was just sent.
        for k in 0..self.workers.len() {
            self.deliver_to_worker(k)?;
        }
        let order = if self.forced {
            forced_split_schedule(mgr.k)
        } else {
            deterministic_schedule(self.seed, mgr.tag, mgr.k)
        };
        for k in order {
            if mgr.accepted.len() >= need {
                break;
            }
            let Some((_, frame)) = self.workers[k].compute() else {
                continue;
            };
            self.workers[k].deliver(frame)?;
            let reply = mgr.next_frame()?;
            mgr.handle_result(reply)?;
        }
        if mgr.accepted.len() < need {
            return Err(Error::Protocol(format!(
                "only {} of {need} workers could deliver at iteration {}",
                mgr.accepted.len(),
                mgr.tag
            )));
        }
        Ok(())
    }

    fn exact_loglik(&mut self, mgr: &mut Manager<'_, M>) -> Result<ExactSum> {
        let mut total = ExactSum::new();
        let payload = mgr.model.encode_params(&mgr.theta);
        for k in 0..mgr.k {
            mgr.send_to(
                k,
                Frame::new(super::wire::Kind::LoglikRequest, k, mgr.tag, payload.clone()),
            )?;
            mgr.trace.messages.loglik_requests += 1;
            self.deliver_to_worker(k)?;
            let reply = mgr.next_frame()?;
            if reply.kind == super::wire::Kind::Failure {
                return Err(Error::WorkerFailed {
                    subset: reply.subset(),
                    reason: reply.failure_reason(),
                });
            }
            let ll = ExactSum::decode(&mut reply.payload.as_slice())
                .ok_or_else(|| Error::Protocol("malformed log-likelihood reply".into()))?;
            total.merge(&ll);
        }
        Ok(total)
    }
}

pub(crate) fn run<M: EmModel>(
    config: &RunConfig,
    model: &M,
    subsets: &[M::Subset],
    theta0: &M::Params,
    algorithm: &str,
) -> Result<(M::Params, super::Trace)> {
    let k = config.k;
    let (txs, inboxes): (Vec<_>, Vec<_>) = (0..k).map(|_| bounded(k.max(1))).unzip();
    let mut links = Links::connect(config.transport, txs)?;
    let mut workers = Vec::with_capacity(k);
    for (id, subset) in subsets.iter().enumerate() {
        let out = links.take_worker_sender(id)?;
        workers.push(Worker::new(id, model, subset, out, config.in_flight));
    }
    let to_workers = std::mem::take(&mut links.to_workers);
    let inbox = links.manager_inbox.clone();
    let mut mgr = Manager::new(model, config, algorithm, theta0.clone(), to_workers, inbox);
    let mut driver = Lockstep {
        workers,
        inboxes,
        seed: config.seed,
        forced: config.scheduler == Scheduler::ForcedSplit,
    };
    let result = super::manager::drive(&mut mgr, &mut driver);
    drop(driver);
    drop(links);
    result.map(|()| (mgr.theta, mgr.trace))
}
