//! Run comparisons: parameter error against a reference fit, RMSE over
//! replications, log-likelihood and iteration ratios, per-worker acceptance
//! fractions and the information-matrix speed report.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{information_matrices, speed_matrices, EigenSummary, LmmModel, SubsetData, Theta};
use crate::runtime::Trace;

/// Root-mean-square differences between two fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrReport {
    pub reference: String,
    pub err_beta: f64,
    pub err_tau2: f64,
    /// Over the diagonal of `Σ`.
    pub err_var: f64,
    /// Over the strict upper triangle of `Σ`; absent when `q < 2`.
    pub err_cov: Option<f64>,
}

pub fn compute_err(estimate: &Theta, reference: &Theta, label: impl Into<String>) -> Result<ErrReport> {
    if (estimate.p(), estimate.q()) != (reference.p(), reference.q()) {
        return Err(Error::Dimension(format!(
            "comparing a (p={}, q={}) fit with a (p={}, q={}) reference",
            estimate.p(),
            estimate.q(),
            reference.p(),
            reference.q()
        )));
    }
    let (p, q) = (estimate.p(), estimate.q());
    let err_beta = ((&estimate.beta - &reference.beta).norm_squared() / p as f64).sqrt();
    let err_tau2 = (estimate.tau2 - reference.tau2).abs();
    let (s, r) = (estimate.sigma(), reference.sigma());
    let var: f64 = (0..q).map(|i| (s[(i, i)] - r[(i, i)]).powi(2)).sum();
    let err_var = (var / q as f64).sqrt();
    let err_cov = (q >= 2).then(|| {
        let mut acc = 0.0;
        for i in 0..q {
            for j in i + 1..q {
                acc += (s[(i, j)] - r[(i, j)]).powi(2);
            }
        }
        (2.0 * acc / (q * (q - 1)) as f64).sqrt()
    });
    Ok(ErrReport {
        reference: label.into(),
        err_beta,
        err_tau2,
        err_var,
        err_cov,
    })
}

/// RMSE of one field with the Monte Carlo standard error from the delta
/// method, `sd(err²) / (2 · RMSE · √R)`. The error is absent for `R < 2`
/// and zero when every replication has zero error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseField {
    pub rmse: f64,
    pub mc_se: Option<f64>,
}

fn rmse_field(sq: &[f64]) -> RmseField {
    let r = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / r;
    let rmse = mean.sqrt();
    let mc_se = (sq.len() >= 2).then(|| {
        if rmse == 0.0 {
            return 0.0;
        }
        let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        var.sqrt() / (2.0 * rmse * r.sqrt())
    });
    RmseField { rmse, mc_se }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRecord {
    pub replications: usize,
    pub beta: RmseField,
    pub tau2: RmseField,
    pub var: RmseField,
    pub cov: Option<RmseField>,
}

pub fn aggregate_rmse(reports: &[ErrReport]) -> Result<RmseRecord> {
    if reports.is_empty() {
        return Err(Error::Config("RMSE needs at least one replication".into()));
    }
    let sq = |f: fn(&ErrReport) -> f64| -> Vec<f64> { reports.iter().map(|r| f(r).powi(2)).collect() };
    let cov: Option<Vec<f64>> = reports.iter().map(|r| r.err_cov.map(|v| v * v)).collect();
    Ok(RmseRecord {
        replications: reports.len(),
        beta: rmse_field(&sq(|r| r.err_beta)),
        tau2: rmse_field(&sq(|r| r.err_tau2)),
        var: rmse_field(&sq(|r| r.err_var)),
        cov: cov.map(|c| rmse_field(&c)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub loglik_ratio: f64,
    pub iter_ratio: f64,
    pub time_ratio: f64,
    pub iterations: u64,
    pub base_iterations: u64,
    /// Both runs met the tolerance rather than stopping at the cap.
    pub both_converged: bool,
}

pub fn ratio_report(trace: &Trace, base: &Trace) -> RatioReport {
    let time_ratio = if base.elapsed_secs > 0.0 {
        trace.elapsed_secs / base.elapsed_secs
    } else {
        f64::NAN
    };
    RatioReport {
        loglik_ratio: trace.final_loglik / base.final_loglik,
        iter_ratio: trace.iterations() as f64 / base.iterations() as f64,
        time_ratio,
        iterations: trace.iterations(),
        base_iterations: base.iterations(),
        both_converged: trace.converged && base.converged,
    }
}

/// Fraction of iterations in which each worker's result was accepted,
/// seeding included.
pub fn empirical_gamma(trace: &Trace) -> Vec<f64> {
    let t = trace.entries.len();
    let mut hits = vec![0usize; trace.k];
    for e in &trace.entries {
        for &k in &e.accepted {
            if let Some(h) = hits.get_mut(k) {
                *h += 1;
            }
        }
    }
    hits.iter()
        .map(|&h| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
}

/// Serializable summary of the speed-matrix analysis for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedDiagnostics {
    pub split: Vec<usize>,
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
    pub identity_residual: f64,
    pub identity_ok: bool,
    pub eig_s_em: EigenSummary,
    pub eig_s_dem: EigenSummary,
    pub eig_c: EigenSummary,
    pub eig_o: EigenSummary,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub upper_bound_max: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub gap_ok: bool,
    pub sv_lower_ok: bool,
    pub sv_upper_ok: bool,
    pub tol: f64,
    pub s_em: Vec<Vec<f64>>,
    pub s_dem: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub o: Vec<Vec<f64>>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn speed_diagnostics(
    model: &LmmModel,
    theta_hat: &Theta,
    subsets: &[SubsetData],
    in_a: &[usize],
    tol: f64,
) -> Result<SpeedDiagnostics> {
    let info = information_matrices(model, theta_hat, subsets, in_a)?;
    let s = speed_matrices(&info, tol)?;
    Ok(SpeedDiagnostics {
        split: in_a.to_vec(),
        gradient_norm: info.gradient_norm,
        warnings: info.warnings,
        identity_residual: s.identity_residual,
        identity_ok: s.identity_ok,
        eig_s_em: s.eig_s_em,
        eig_s_dem: s.eig_s_dem,
        eig_c: s.eig_c,
        eig_o: s.eig_o,
        lower_bound: s.lower_bound,
        upper_bound: s.upper_bound,
        upper_bound_max: s.upper_bound_max,
        lower_ok: s.lower_ok,
        upper_ok: s.upper_ok,
        gap_ok: s.gap_ok,
        sv_lower_ok: s.sv_lower_ok,
        sv_upper_ok: s.sv_upper_ok,
        tol,
        s_em: rows(&s.s_em),
        s_dem: rows(&s.s_dem),
        c: rows(&s.c),
        o: rows(&s.o),
    })
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub reference: String,
    pub algorithm: String,
    pub k: usize,
    pub gamma: f64,
    pub err_beta: f64,
    pub err_tau2: f64,
    pub err_var: f64,
    pub err_cov: Option<f64>,
    pub loglik: f64,
    pub reference_loglik: f64,
    pub loglik_ratio: f64,
    pub iter_ratio: f64,
    pub time_ratio: f64,
    pub iterations: u64,
    pub reference_iterations: u64,
    pub converged: bool,
}

/// Write serializable rows as CSV with a header line.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
