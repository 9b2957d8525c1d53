use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dem_core::datagen::{
    build_movielens_features, convert_colon_format, partition, read_ratings_csv, simulate, synthetic_ratings, RatingsDesign,
    write_ratings_csv, SimDesign, MOVIELENS_COLUMNS,
};
use dem_core::diagnostics::{
    aggregate_rmse, compute_err, ratio_report, speed_diagnostics, write_csv, CompareRow, ErrReport,
};
use dem_core::io::{read_dataset, read_json, sidecar_path, write_dataset, write_json, DatasetMeta};
use dem_core::lmm::{CmOrder, LmmModel, Theta, ThetaRecord};
use dem_core::runtime::{run_ecme0, run_scheme, RunConfig, RunOutput, Scheduler, Trace};
use dem_core::Error;

use crate::args::{CompareArgs, DiagnoseArgs, FitArgs, IngestArgs, SimulateArgs};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MAX_ITER: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: EXIT_USAGE,
        message: message.into(),
    }
    .into()
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value.clone().ok_or_else(|| usage(format!("--{flag} is required")))
}

/// Parse a kebab- or snake-case name into one of the core enums.
fn parse_name<T: DeserializeOwned>(value: &str, flag: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.replace('-', "_")))
        .map_err(|_| usage(format!("--{flag}: unknown value {value:?}")))
}

pub fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    if let Some(records) = a.ratings {
        for (flag, set) in [("m", a.m.is_some()), ("n", a.n.is_some()), ("p", a.p.is_some()), ("q", a.q.is_some())] {
            if set {
                return Err(usage(format!("--{flag} does not apply to --ratings")));
            }
        }
        let synth = synthetic_ratings(&RatingsDesign::new(records, seed))?;
        write_ratings_csv(File::create(&out)?, &synth.records)?;
        write_json(
            &sidecar_path(&out),
            &serde_json::json!({
                "records": synth.records.len(),
                "seed": seed,
                "columns": MOVIELENS_COLUMNS,
                "truth": ThetaRecord::from(&synth.truth),
                "source": "simulate --ratings",
            }),
        )?;
        println!("wrote {} ratings records to {}", synth.records.len(), out.display());
        return Ok(());
    }

    let m = a.m.unwrap_or(200);
    let mut design = SimDesign::new(m, a.n.unwrap_or(100 * m), a.p.unwrap_or(10), a.q.unwrap_or(3), seed);
    if let Some(t) = a.tau2 {
        design.tau2 = t;
    }
    let sim = simulate(&design).map_err(|e| usage(format!("invalid design: {e}")))?;
    let mut meta = DatasetMeta::for_dataset(&sim.dataset, "simulate");
    meta.seed = Some(seed);
    meta.truth = Some(ThetaRecord::from(&sim.truth));
    write_dataset(&out, &sim.dataset, &meta)?;
    println!(
        "wrote m={} n={} p={} q={} to {}",
        meta.m,
        meta.n,
        meta.p,
        meta.q,
        out.display()
    );
    Ok(())
}

/// Summary written next to the trace by `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub algorithm: String,
    pub data: PathBuf,
    pub p: usize,
    pub q: usize,
    pub config: RunConfig,
    pub partition_seed: Option<u64>,
    pub cm_order: CmOrder,
    pub theta: ThetaRecord,
    /// Exact parameter encoding `(β, vech L, τ²)`.
    pub theta_vec: Vec<f64>,
    pub converged: bool,
    pub hit_max_iter: bool,
    pub iterations: u64,
    pub final_loglik: f64,
    pub elapsed_secs: f64,
}

pub fn cmd_fit(a: FitArgs) -> Result<()> {
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let algo = a.algo.clone().unwrap_or_else(|| "dem".into());
    let distributed_only = [
        ("K", a.k.is_some()),
        ("scheduler", a.scheduler.is_some()),
        ("deterministic", a.deterministic),
        ("transport", a.transport.is_some()),
        ("scheme", a.scheme.is_some()),
        ("in-flight", a.in_flight.is_some()),
        ("exact-loglik", a.exact_loglik),
        ("partition-seed", a.partition_seed.is_some()),
    ];
    let mut config = match algo.as_str() {
        "ecme0" => {
            if a.gamma.is_some() {
                return Err(usage("--gamma does not apply to --algo ecme0"));
            }
            if let Some((flag, _)) = distributed_only.iter().find(|(_, set)| *set) {
                return Err(usage(format!("--{flag} does not apply to --algo ecme0")));
            }
            RunConfig::default()
        }
        "iem" => {
            if a.gamma.is_some() {
                return Err(usage("--gamma does not apply to --algo iem (it waits for one worker)"));
            }
            RunConfig::iem(a.k.unwrap_or(20))
        }
        "dem" => RunConfig::dem(a.k.unwrap_or(20), a.gamma.unwrap_or(0.7)),
        other => return Err(usage(format!("--algo must be ecme0, iem or dem, not {other:?}"))),
    };
    if a.deterministic && a.scheduler.as_deref().is_some_and(|s| s != "deterministic") {
        return Err(usage("--deterministic conflicts with --scheduler"));
    }
    config.tol = a.tol.unwrap_or(config.tol);
    config.max_iter = a.max_iter.unwrap_or(config.max_iter);
    config.seed = a.seed.unwrap_or(0);
    if a.deterministic {
        config.scheduler = Scheduler::Deterministic;
    }
    if let Some(s) = &a.scheduler {
        config.scheduler = parse_name(s, "scheduler")?;
    }
    if let Some(s) = &a.transport {
        config.transport = parse_name(s, "transport")?;
    }
    if let Some(s) = &a.scheme {
        config.scheme = parse_name(s, "scheme")?;
    }
    if let Some(s) = &a.in_flight {
        config.in_flight = parse_name(s, "in-flight")?;
    }
    config.exact_loglik_check = a.exact_loglik;
    let cm_order: CmOrder = match &a.cm_order {
        Some(s) => parse_name(s, "cm-order")?,
        None => CmOrder::default(),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;

    let (dataset, _) = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    let model = LmmModel::new(dataset.p, dataset.q).with_cm_order(cm_order);
    let theta0 = Theta::starting(dataset.p, dataset.q);
    let partition_seed = (algo != "ecme0").then(|| a.partition_seed.unwrap_or(config.seed));

    let result = match partition_seed {
        None => run_ecme0(&config, &model, &dataset.as_single_subset()?, &theta0),
        Some(ps) => {
            let parts = partition(&dataset, config.k, ps).map_err(|e| usage(e.to_string()))?;
            run_scheme(&config, &model, &parts, &theta0)
        }
    };
    std::fs::create_dir_all(&out)?;
    let RunOutput { theta, trace } = match result {
        Ok(r) => r,
        Err(Error::Diverged { iteration, trace }) => {
            trace.write_json(&out.join("trace.json"))?;
            return Err(Exit {
                code: EXIT_DIVERGED,
                message: format!("diverged at iteration {iteration}; partial trace in {}", out.display()),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };

    trace.write_json(&out.join("trace.json"))?;
    write_json(&out.join("theta.json"), &ThetaRecord::from(&theta))?;
    let summary = FitSummary {
        algorithm: trace.algorithm.clone(),
        data,
        p: dataset.p,
        q: dataset.q,
        config,
        partition_seed,
        cm_order,
        theta: ThetaRecord::from(&theta),
        theta_vec: theta.to_vec(),
        converged: trace.converged,
        hit_max_iter: trace.hit_max_iter,
        iterations: trace.iterations(),
        final_loglik: trace.final_loglik,
        elapsed_secs: trace.elapsed_secs,
    };
    write_json(&out.join("fit.json"), &summary)?;
    println!(
        "{}: {} iterations, loglik {:.10e}, converged {}",
        summary.algorithm, summary.iterations, summary.final_loglik, summary.converged
    );
    if !trace.converged && !a.allow_maxiter {
        return Err(Exit {
            code: EXIT_MAX_ITER,
            message: format!(
                "stopped at the iteration cap ({}) without converging; pass --allow-maxiter to accept",
                summary.iterations
            ),
        }
        .into());
    }
    Ok(())
}

struct LoadedFit {
    label: String,
    theta: Theta,
    trace: Option<Trace>,
}

fn load_fit(path: &Path) -> Result<LoadedFit> {
    let label = path.display().to_string();
    if path.is_dir() {
        let summary: FitSummary = read_json(&path.join("fit.json"))
            .with_context(|| format!("reading {}", path.join("fit.json").display()))?;
        let theta = Theta::from_vec(summary.p, summary.q, &summary.theta_vec)?;
        let trace = Trace::read_json(&path.join("trace.json")).ok();
        return Ok(LoadedFit { label, theta, trace });
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {label}"))?;
    if let Ok(summary) = serde_json::from_str::<FitSummary>(&text) {
        let theta = Theta::from_vec(summary.p, summary.q, &summary.theta_vec)?;
        return Ok(LoadedFit { label, theta, trace: None });
    }
    let record: ThetaRecord =
        serde_json::from_str(&text).with_context(|| format!("{label} is neither a fit nor a θ record"))?;
    Ok(LoadedFit {
        label,
        theta: Theta::try_from(&record)?,
        trace: None,
    })
}

pub fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut runs = a.runs.clone();
    let reference = match &a.reference {
        Some(r) => r.clone(),
        None if runs.len() >= 2 => runs.remove(0),
        None => return Err(usage("compare needs at least two fits (or --reference and one fit)")),
    };
    if runs.is_empty() {
        return Err(usage("compare needs at least one fit besides the reference"));
    }
    let base = load_fit(&reference)?;
    let base_label = base
        .trace
        .as_ref()
        .map_or_else(|| base.label.clone(), |t| format!("{}:{}", t.algorithm, base.label));

    let mut rows = Vec::new();
    let mut reports: Vec<ErrReport> = Vec::new();
    for path in &runs {
        let fit = load_fit(path)?;
        let err = compute_err(&fit.theta, &base.theta, base_label.clone())
            .with_context(|| format!("comparing {} with {}", fit.label, base.label))?;
        let (ratio, algorithm, k, gamma, loglik, converged) = match (&fit.trace, &base.trace) {
            (Some(t), Some(b)) => (
                Some(ratio_report(t, b)),
                t.algorithm.clone(),
                t.k,
                t.gamma,
                t.final_loglik,
                t.converged,
            ),
            (Some(t), None) => (None, t.algorithm.clone(), t.k, t.gamma, t.final_loglik, t.converged),
            _ => (None, "external".into(), 0, f64::NAN, f64::NAN, false),
        };
        rows.push(CompareRow {
            run: fit.label.clone(),
            reference: base_label.clone(),
            algorithm,
            k,
            gamma,
            err_beta: err.err_beta,
            err_tau2: err.err_tau2,
            err_var: err.err_var,
            err_cov: err.err_cov,
            loglik,
            reference_loglik: base.trace.as_ref().map_or(f64::NAN, |t| t.final_loglik),
            loglik_ratio: ratio.as_ref().map_or(f64::NAN, |r| r.loglik_ratio),
            iter_ratio: ratio.as_ref().map_or(f64::NAN, |r| r.iter_ratio),
            time_ratio: ratio.as_ref().map_or(f64::NAN, |r| r.time_ratio),
            iterations: fit.trace.as_ref().map_or(0, |t| t.iterations()),
            reference_iterations: base.trace.as_ref().map_or(0, |t| t.iterations()),
            converged,
        });
        reports.push(err);
    }
    match &a.out {
        Some(p) => write_csv(File::create(p)?, &rows)?,
        None => write_csv(std::io::stdout().lock(), &rows)?,
    }
    if let Some(p) = &a.rmse_out {
        write_json(p, &aggregate_rmse(&reports)?)?;
    }
    Ok(())
}

pub fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    let data = required(&a.data, "data")?;
    let theta_path = required(&a.theta, "theta")?;
    let (dataset, _) = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
    let theta = load_fit(&theta_path)?.theta;
    if (theta.p(), theta.q()) != (dataset.p, dataset.q) {
        bail!(
            "estimate has p={}, q={} but the dataset has p={}, q={}",
            theta.p(),
            theta.q(),
            dataset.p,
            dataset.q
        );
    }
    let k = a.k.unwrap_or(10);
    let parts = partition(&dataset, k, a.partition_seed.unwrap_or(0)).map_err(|e| usage(e.to_string()))?;
    let split = match &a.split {
        Some(s) if !s.is_empty() => s.clone(),
        _ => {
            let gamma = a.gamma.unwrap_or(0.5);
            if !(gamma > 0.0 && gamma <= 1.0) {
                return Err(usage("--gamma must lie in (0, 1]"));
            }
            let n = RunConfig::dem(k, gamma).threshold();
            (0..n).collect()
        }
    };
    let model = LmmModel::new(dataset.p, dataset.q);
    let report = speed_diagnostics(&model, &theta, &parts, &split, a.bound_tol.unwrap_or(1e-4))
        .map_err(|e| match e {
            Error::Config(m) => usage(m),
            other => anyhow!(other),
        })?;
    eprintln!(
        "identity residual {:.3e} ({}), lower bound {}, upper bound {}, corrected upper bound {}",
        report.identity_residual,
        if report.identity_ok { "ok" } else { "FAILED" },
        if report.lower_ok { "holds" } else { "violated" },
        if report.upper_ok { "holds" } else { "violated" },
        if report.eig_s_em.min <= report.upper_bound_max + report.tol {
            "holds"
        } else {
            "violated"
        },
    );
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let out = required(&a.out, "out")?;
    let (records, source) = match (&a.ratings, &a.colon_ratings, &a.movies) {
        (Some(csv), None, None) => (read_ratings_csv(File::open(csv)?)?, format!("ingest:{}", csv.display())),
        (None, Some(r), Some(m)) => (
            convert_colon_format(BufReader::new(File::open(r)?), BufReader::new(File::open(m)?))?,
            format!("ingest:{}", r.display()),
        ),
        _ => return Err(usage("give either --ratings FILE or --colon-ratings FILE --movies FILE")),
    };
    if let Some(csv) = &a.csv_out {
        write_ratings_csv(File::create(csv)?, &records)?;
    }
    let built = build_movielens_features(&records)?;
    let mut meta = DatasetMeta::for_dataset(&built.dataset, source);
    meta.columns = Some(MOVIELENS_COLUMNS.iter().map(|s| s.to_string()).collect());
    write_dataset(&out, &built.dataset, &meta)?;
    println!(
        "wrote {} users, {} ratings to {}",
        meta.m,
        meta.n,
        out.display()
    );
    Ok(())
}
