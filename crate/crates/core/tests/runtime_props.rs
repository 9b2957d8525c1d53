mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use dem_core::datagen::{partition, simulate, SimDesign};
use dem_core::exact::ExactSum;
use dem_core::lmm::{LmmModel, LmmStats, SubsetData, Theta};
use dem_core::model::{check_monotone_f, EStep, EmModel};
use dem_core::runtime::{
    run_dem, run_ecme0, run_scheme, InFlightPolicy, RunConfig, Scheduler, Scheme, Trace, TransportKind,
};
use dem_core::{Error, Result};

fn problem(m: usize, n: usize, seed: u64) -> (LmmModel, SubsetData, dem_core::lmm::Dataset) {
    let sim = simulate(&SimDesign::new(m, n, 3, 3, seed)).unwrap();
    let whole = sim.dataset.as_single_subset().unwrap();
    (LmmModel::new(3, 3), whole, sim.dataset)
}

fn cfg(k: usize, gamma: f64) -> RunConfig {
    RunConfig {
        seed: 9,
        ..RunConfig::dem(k, gamma)
    }
}

/// Trace content that does not depend on wall-clock time.
fn timeless(t: &Trace) -> Trace {
    let mut t = t.clone();
    t.elapsed_secs = 0.0;
    t.transport.clear();
    for e in &mut t.entries {
        e.elapsed_secs = 0.0;
    }
    t
}

#[test]
fn full_gamma_reproduces_ecme0_bit_for_bit() {
    let (model, whole, data) = problem(80, 1600, 41);
    let theta0 = Theta::starting(3, 3);
    let base = run_ecme0(&RunConfig::default(), &model, &whole, &theta0).unwrap();
    for k in [1, 5, 10] {
        let subsets = partition(&data, k, 4).unwrap();
        let out = run_dem(&cfg(k, 1.0), &model, &subsets, &theta0).unwrap();
        assert_eq!(out.trace.iterations(), base.trace.iterations(), "K = {k}");
        for (a, b) in out.trace.entries.iter().zip(&base.trace.entries) {
            assert_eq!(a.theta, b.theta, "K = {k}, iteration {}", a.iteration);
            assert_eq!(a.loglik.to_bits(), b.loglik.to_bits());
        }
        assert_eq!(out.theta.to_vec(), base.theta.to_vec());
    }
}

#[test]
fn schemes_agree_and_count_messages() {
    let (model, whole, data) = problem(60, 1200, 42);
    let theta0 = Theta::starting(3, 3);
    let k = 6;
    let subsets = partition(&data, k, 1).unwrap();
    let base = run_ecme0(&RunConfig::default(), &model, &whole, &theta0).unwrap();
    let sync = run_scheme(&RunConfig { scheme: Scheme::Synchronous, ..cfg(k, 0.3) }, &model, &subsets, &theta0).unwrap();
    let pairs = run_scheme(&RunConfig { scheme: Scheme::NaiveAllpairs, ..cfg(k, 1.0) }, &model, &subsets, &theta0).unwrap();
    assert_eq!(sync.theta.to_vec(), base.theta.to_vec());
    assert_eq!(pairs.theta.to_vec(), base.theta.to_vec());
    assert_eq!(pairs.trace.iterations(), base.trace.iterations());

    let t = sync.trace.iterations();
    // One broadcast and one result per worker per round, the seeding round included.
    assert_eq!(sync.trace.messages.broadcasts + sync.trace.messages.results, 2 * k as u64 * (t + 1));
    let rounds = pairs.trace.iterations() + 1;
    assert_eq!(pairs.trace.messages.peer_payloads, (k * (k - 1)) as u64 * rounds);
}

#[test]
fn socket_and_in_process_traces_match() {
    let (model, _, data) = problem(60, 1200, 43);
    let subsets = partition(&data, 5, 2).unwrap();
    let theta0 = Theta::starting(3, 3);
    let a = run_dem(&cfg(5, 0.5), &model, &subsets, &theta0).unwrap();
    let sock = RunConfig {
        transport: TransportKind::Socket,
        ..cfg(5, 0.5)
    };
    let b = run_dem(&sock, &model, &subsets, &theta0).unwrap();
    assert_eq!(timeless(&a.trace), timeless(&b.trace));
}

#[test]
fn deterministic_scheduler_is_reproducible() {
    let (model, _, data) = problem(60, 1200, 44);
    let subsets = partition(&data, 8, 2).unwrap();
    let theta0 = Theta::starting(3, 3);
    let a = run_dem(&cfg(8, 0.4), &model, &subsets, &theta0).unwrap();
    let b = run_dem(&cfg(8, 0.4), &model, &subsets, &theta0).unwrap();
    assert_eq!(timeless(&a.trace), timeless(&b.trace));
    let other = run_dem(&RunConfig { seed: 10, ..cfg(8, 0.4) }, &model, &subsets, &theta0).unwrap();
    assert_ne!(timeless(&a.trace).entries, timeless(&other.trace).entries);
}

#[test]
fn accept_sets_have_threshold_size() {
    let (model, _, data) = problem(100, 2000, 45);
    let subsets = partition(&data, 20, 2).unwrap();
    let out = run_dem(&cfg(20, 0.3), &model, &subsets, &Theta::starting(3, 3)).unwrap();
    assert_eq!(out.trace.threshold, 6);
    let entries = &out.trace.entries;
    assert_eq!(entries[0].accepted.len(), 20, "seeding step uses every worker");
    assert!(entries[1..].iter().all(|e| e.accepted.len() == 6));
    for (i, e) in entries.iter().enumerate() {
        let t = e.iteration;
        for (k, &tag) in e.anchors.iter().enumerate() {
            assert!(tag < t);
            if e.accepted.contains(&k) {
                assert_eq!(tag, t - 1);
            }
            if i > 0 {
                assert!(tag >= entries[i - 1].anchors[k], "anchors never move backwards");
            }
            assert_eq!(e.staleness[k], t - 1 - tag);
        }
    }
    let max = entries.iter().flat_map(|e| e.staleness.iter().copied()).max().unwrap();
    assert_eq!(out.trace.max_staleness, max);
}

#[test]
fn forced_split_always_accepts_the_same_workers() {
    let (model, _, data) = problem(60, 1200, 46);
    let subsets = partition(&data, 10, 2).unwrap();
    let config = RunConfig {
        scheduler: Scheduler::ForcedSplit,
        max_iter: 50,
        ..cfg(10, 0.5)
    };
    let out = run_dem(&config, &model, &subsets, &Theta::starting(3, 3)).unwrap();
    let want: Vec<usize> = (0..5).collect();
    assert!(out.trace.entries[1..].iter().all(|e| e.accepted == want));
    let last = out.trace.entries.last().unwrap();
    assert!(last.anchors[5..].iter().all(|&a| a == 0), "workers 5..10 only ever contributed at θ0");
}

#[test]
fn incremental_em_accepts_one_worker_per_step() {
    let (model, _, data) = problem(40, 800, 47);
    let subsets = partition(&data, 8, 2).unwrap();
    let out = run_dem(&RunConfig { seed: 3, ..RunConfig::iem(8) }, &model, &subsets, &Theta::starting(3, 3)).unwrap();
    assert_eq!(out.trace.algorithm, "iem");
    assert!(out.trace.entries[1..].iter().all(|e| e.accepted.len() == 1));
}

#[test]
fn free_energy_never_decreases() {
    let (model, whole, data) = problem(80, 1600, 48);
    let subsets = partition(&data, 10, 3).unwrap();
    let theta0 = Theta::starting(3, 3);
    let out = run_dem(&cfg(10, 0.5), &model, &subsets, &theta0).unwrap();
    let bad = check_monotone_f(&out.trace, &model, &subsets, 1e-12).unwrap();
    assert!(bad.is_empty(), "{bad:?}");
    let base = run_ecme0(&RunConfig::default(), &model, &whole, &theta0).unwrap();
    let rel = (out.trace.final_loglik / base.trace.final_loglik - 1.0).abs();
    assert!(rel < 1e-4, "relative log-likelihood gap {rel:e}");
}

#[test]
fn free_energy_check_catches_a_scrambled_trace() {
    let (model, _, data) = problem(80, 1600, 49);
    let subsets = partition(&data, 10, 3).unwrap();
    let out = run_dem(&cfg(10, 0.5), &model, &subsets, &Theta::starting(3, 3)).unwrap();
    let mut trace = out.trace.clone();
    // Swap two late parameters with early ones; the anchors no longer match.
    let n = trace.entries.len();
    let early = trace.entries[1].theta.clone();
    trace.entries[n - 2].theta = early;
    let bad = check_monotone_f(&trace, &model, &subsets, 1e-12).unwrap();
    assert!(!bad.is_empty());
}

#[test]
fn threaded_scheduler_reaches_the_same_mode() {
    let (model, whole, data) = problem(80, 1600, 50);
    let subsets = partition(&data, 6, 3).unwrap();
    let theta0 = Theta::starting(3, 3);
    let base = run_ecme0(&RunConfig::default(), &model, &whole, &theta0).unwrap();
    for policy in [InFlightPolicy::AbortAndRestart, InFlightPolicy::FinishAndSend] {
        let config = RunConfig {
            scheduler: Scheduler::Real,
            in_flight: policy,
            max_iter: 5000,
            ..cfg(6, 0.5)
        };
        let out = run_dem(&config, &model, &subsets, &theta0).unwrap();
        assert!(out.trace.converged, "{policy:?}");
        let rel = (out.trace.final_loglik / base.trace.final_loglik - 1.0).abs();
        assert!(rel < 1e-4, "{policy:?}: relative gap {rel:e}");
        assert!(out.trace.entries[1..].iter().all(|e| e.accepted.len() >= 3));
        for k in 0..6 {
            assert!(
                out.trace.entries[1..].iter().any(|e| e.accepted.contains(&k)),
                "{policy:?}: worker {k} never contributed after seeding"
            );
        }
        let bad = check_monotone_f(&out.trace, &model, &subsets, 1e-12).unwrap();
        assert!(bad.is_empty(), "{policy:?}: {bad:?}");
    }
}

#[test]
fn socket_transport_under_threads() {
    let (model, _, data) = problem(40, 800, 51);
    let subsets = partition(&data, 4, 3).unwrap();
    let config = RunConfig {
        scheduler: Scheduler::Real,
        transport: TransportKind::Socket,
        ..cfg(4, 0.5)
    };
    let out = run_dem(&config, &model, &subsets, &Theta::starting(3, 3)).unwrap();
    assert!(out.trace.converged);
}

#[test]
fn exact_loglik_check_marks_nothing_stale() {
    let (model, _, data) = problem(40, 800, 52);
    let subsets = partition(&data, 5, 3).unwrap();
    let config = RunConfig {
        exact_loglik_check: true,
        ..cfg(5, 0.4)
    };
    let out = run_dem(&config, &model, &subsets, &Theta::starting(3, 3)).unwrap();
    for e in &out.trace.entries {
        assert!(!e.loglik_stale);
        let theta = Theta::from_vec(3, 3, &e.theta).unwrap();
        let direct: f64 = subsets.iter().map(|s| model.local_loglik(&theta, s).unwrap()).sum();
        assert!((e.loglik - direct).abs() < 1e-8 * direct.abs());
    }
    assert!(out.trace.messages.loglik_requests > 0);
}

#[test]
fn rejects_mismatched_partition() {
    let (model, _, data) = problem(20, 200, 53);
    let subsets = partition(&data, 4, 3).unwrap();
    let err = run_dem(&cfg(5, 0.5), &model, &subsets, &Theta::starting(3, 3)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = run_dem(&cfg(4, 0.0), &model, &subsets, &Theta::starting(3, 3)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Wraps the mixed model and breaks it in controlled ways.
struct Faulty {
    inner: LmmModel,
    fail_subset: Option<usize>,
    nan_after: Option<usize>,
    m_steps: AtomicUsize,
}

impl Faulty {
    fn new(fail_subset: Option<usize>, nan_after: Option<usize>) -> Self {
        Faulty {
            inner: LmmModel::new(3, 3),
            fail_subset,
            nan_after,
            m_steps: AtomicUsize::new(0),
        }
    }
}

impl EmModel for Faulty {
    type Params = Theta;
    type Subset = SubsetData;
    type Stats = LmmStats;

    fn local_loglik_parts(&self, theta: &Theta, subset: &SubsetData) -> Result<ExactSum> {
        self.inner.local_loglik_parts(theta, subset)
    }

    fn local_estep(&self, theta: &Theta, subset: &SubsetData) -> Result<EStep<LmmStats>> {
        if self.fail_subset == Some(subset.id) {
            return Err(Error::domain("injected failure"));
        }
        self.inner.local_estep(theta, subset)
    }

    fn cm_steps(&self, agg: &LmmStats, current: &Theta) -> Result<Theta> {
        let done = self.m_steps.fetch_add(1, Ordering::SeqCst);
        let mut next = self.inner.cm_steps(agg, current)?;
        if self.nan_after.is_some_and(|n| done >= n) {
            next.tau2 = f64::NAN;
        }
        Ok(next)
    }

    fn local_kl(&self, e: &Theta, a: &Theta, subset: &SubsetData) -> Result<f64> {
        self.inner.local_kl(e, a, subset)
    }

    fn n_obs(&self, subset: &SubsetData) -> usize {
        self.inner.n_obs(subset)
    }

    fn params_finite(&self, theta: &Theta) -> bool {
        self.inner.params_finite(theta)
    }

    fn encode_params(&self, theta: &Theta) -> Vec<f64> {
        self.inner.encode_params(theta)
    }

    fn decode_params(&self, data: &[f64]) -> Result<Theta> {
        self.inner.decode_params(data)
    }

    fn encode_stats(&self, stats: &LmmStats) -> Vec<f64> {
        self.inner.encode_stats(stats)
    }

    fn decode_stats(&self, data: &[f64]) -> Result<LmmStats> {
        self.inner.decode_stats(data)
    }
}

#[test]
fn worker_failure_names_the_subset() {
    let (_, _, data) = problem(30, 300, 54);
    let subsets = partition(&data, 4, 3).unwrap();
    for scheduler in [Scheduler::Deterministic, Scheduler::Real] {
        let model = Faulty::new(Some(2), None);
        let config = RunConfig { scheduler, ..cfg(4, 0.5) };
        match run_dem(&config, &model, &subsets, &Theta::starting(3, 3)) {
            Err(Error::WorkerFailed { subset, reason }) => {
                assert_eq!(subset, 2);
                assert!(reason.contains("injected failure"), "{reason}");
            }
            other => panic!("{scheduler:?}: expected a worker failure, got {other:?}"),
        }
    }
}

#[test]
fn divergence_returns_the_partial_trace() {
    let (_, _, data) = problem(30, 300, 55);
    let subsets = partition(&data, 4, 3).unwrap();
    let model = Faulty::new(None, Some(3));
    match run_dem(&cfg(4, 0.5), &model, &subsets, &Theta::starting(3, 3)) {
        Err(Error::Diverged { iteration, trace }) => {
            assert_eq!(iteration, 4);
            assert_eq!(trace.entries.len(), 3);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
