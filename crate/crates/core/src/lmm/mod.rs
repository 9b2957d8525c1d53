//! Linear mixed-effects model `y_i = X_iβ + Z_ib_i + e_i`, with
//! `b_i ~ N(0, τ²D)` and `e_i ~ N(0, τ²I)`, as an [`EmModel`] plugin.
//!
//! The random effects are the missing data. Their posterior given `y_i` is
//! Gaussian; with `M_i = I + LᵀZ_iᵀZ_iL` it has
//!
//! ```text
//! b̂_i = L M_i⁻¹ Lᵀ Z_iᵀ(y_i − X_iβ)        Ĉ_i = τ² L M_i⁻¹ Lᵀ
//! ```
//!
//! which equals `D Zᵀ W⁻¹ (y − Xβ)` and `τ²(D − D Zᵀ W⁻¹ Z D)` for
//! `W = Z D Zᵀ + I`, but only factors a `q×q` matrix. `det W = det M_i` gives
//! the marginal log-likelihood the same way.

mod data;
pub mod info;
mod stats;
mod theta;

pub use data::{Dataset, Sample, SampleSummary, SubsetData};
pub use info::{information_matrices, speed_matrices, EigenSummary, InformationMatrices, SpeedReport};
pub use stats::LmmStats;
pub use theta::{Theta, ThetaRecord};

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::model::{EStep, EmModel};
use theta::cholesky_lower;

/// Order of the conditional maximizations inside one M step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmOrder {
    /// β given (D, τ²), then (D, τ²) jointly given the new β.
    #[default]
    Joint,
    /// β, then τ² given the current D, then D given the new τ².
    Sequential,
}

#[derive(Debug, Clone)]
pub struct LmmModel {
    pub p: usize,
    pub q: usize,
    pub cm_order: CmOrder,
}

impl LmmModel {
    pub fn new(p: usize, q: usize) -> Self {
        LmmModel {
            p,
            q,
            cm_order: CmOrder::Joint,
        }
    }

    pub fn with_cm_order(mut self, order: CmOrder) -> Self {
        self.cm_order = order;
        self
    }

    fn check_theta(&self, theta: &Theta) -> Result<()> {
        if theta.p() != self.p || theta.q() != self.q {
            return Err(Error::Dimension(format!(
                "parameter has (p, q) = ({}, {}), model has ({}, {})",
                theta.p(),
                theta.q(),
                self.p,
                self.q
            )));
        }
        Ok(())
    }

    fn check_subset(&self, subset: &SubsetData) -> Result<()> {
        if subset.p() != self.p || subset.q() != self.q {
            return Err(Error::Dimension(format!(
                "subset {} has (p, q) = ({}, {}), model has ({}, {})",
                subset.id,
                subset.p(),
                subset.q(),
                self.p,
                self.q
            )));
        }
        Ok(())
    }

    /// Q function `Σ_i E[log f(y_i, b_i | θ) | y_i, anchor]` reconstructed
    /// from statistics computed at the anchor.
    pub fn q_value(&self, stats: &LmmStats, theta: &Theta) -> Result<f64> {
        stats.check_dims(self.p, self.q)?;
        self.check_theta(theta)?;
        let m = stats.n_samples as f64;
        let n = stats.n_obs as f64;
        let q = self.q as f64;
        let logdet_d = 2.0 * theta.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d_inv_sbb = solve_lower_pair(&theta.chol, &stats.ebb());
        let quad = stats.rss_at(&theta.beta) + d_inv_sbb.trace();
        Ok(-0.5 * (n + m * q) * (2.0 * PI * theta.tau2).ln() - 0.5 * m * logdet_d
            - quad / (2.0 * theta.tau2))
    }
}

/// `(L Lᵀ)⁻¹ B` for lower-triangular `L`.
fn solve_lower_pair(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal");
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("Cholesky factor has a positive diagonal")
}

/// Per-sample pieces shared by the E step and the log-likelihood.
struct SampleMoments {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// `Z_iᵀ(y_i − X_iβ)`.
    rz: DVector<f64>,
    logdet_m: f64,
}

fn sample_moments(theta: &Theta, s: &SampleSummary) -> Result<SampleMoments> {
    let q = theta.q();
    let l = &theta.chol;
    let rz = &s.zty - s.xtz.transpose() * &theta.beta;
    let lt = l.transpose();
    let m = DMatrix::identity(q, q) + &lt * &s.ztz * l;
    let chol_m = m
        .cholesky()
        .ok_or_else(|| Error::domain("I + LᵀZᵀZL is not positive definite"))?;
    let logdet_m = 2.0 * chol_m.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    // G = L M⁻¹ Lᵀ = (D⁻¹ + ZᵀZ)⁻¹
    let g = l * chol_m.solve(&lt);
    let g = (&g + g.transpose()) * 0.5;
    let mean = &g * &rz;
    let cov = g * theta.tau2;
    if !logdet_m.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite posterior moments"));
    }
    Ok(SampleMoments {
        mean,
        cov,
        rz,
        logdet_m,
    })
}

fn sample_loglik(theta: &Theta, s: &SampleSummary, mm: &SampleMoments) -> f64 {
    let beta = &theta.beta;
    let rr = s.yty - 2.0 * beta.dot(&s.xty) + beta.dot(&(&s.xtx * beta));
    let quad = rr - mm.rz.dot(&mm.mean);
    -0.5 * s.n as f64 * (2.0 * PI * theta.tau2).ln() - 0.5 * mm.logdet_m - quad / (2.0 * theta.tau2)
}

/// Posterior mean and covariance of `b_i` given `y_i` at `theta`.
pub fn posterior_moments(theta: &Theta, sample: &Sample) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if theta.p() != sample.p() || theta.q() != sample.q() {
        return Err(Error::Dimension("sample and parameter disagree on (p, q)".into()));
    }
    let mm = sample_moments(theta, sample.summary())?;
    Ok((mm.mean, mm.cov))
}

/// `KL(N(mean_a, cov_a) ‖ N(mean_e, cov_e))`.
fn gaussian_kl(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_e: &DVector<f64>,
    cov_e: &DMatrix<f64>,
) -> Result<f64> {
    let q = mean_a.len() as f64;
    let la = cholesky_lower(cov_a).ok_or_else(|| Error::domain("anchor posterior covariance is singular"))?;
    let le = cholesky_lower(cov_e).ok_or_else(|| Error::domain("posterior covariance is singular"))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = solve_lower_pair(&le, cov_a).trace();
    let diff = mean_e - mean_a;
    let w = le
        .solve_lower_triangular(&diff)
        .expect("Cholesky factor has a positive diagonal");
    Ok(0.5 * (trace + w.norm_squared() - q + logdet(&le) - logdet(&la)))
}

impl EmModel for LmmModel {
    type Params = Theta;
    type Subset = SubsetData;
    type Stats = LmmStats;

    fn local_loglik_parts(&self, theta: &Theta, subset: &SubsetData) -> Result<ExactSum> {
        self.check_theta(theta)?;
        self.check_subset(subset)?;
        let mut acc = ExactSum::new();
        for s in subset.samples() {
            let sm = s.summary();
            let mm = sample_moments(theta, sm).map_err(|e| e.in_subset(subset.id))?;
            acc.add(sample_loglik(theta, sm, &mm));
        }
        if !acc.value().is_finite() {
            return Err(Error::Domain {
                subset: Some(subset.id),
                reason: "non-finite log-likelihood".into(),
            });
        }
        Ok(acc)
    }

    fn local_estep(&self, theta: &Theta, subset: &SubsetData) -> Result<EStep<LmmStats>> {
        self.check_theta(theta)?;
        self.check_subset(subset)?;
        let (p, q) = (self.p, self.q);
        let mut stats = LmmStats::zeros(p, q);
        stats.s_xx = subset.fixed.xtx.clone();
        stats.s_xy = subset.fixed.xty.clone();
        stats.s_yy = subset.fixed.yty.clone();
        stats.n_samples = subset.n_samples() as u64;
        stats.n_obs = subset.n_obs() as u64;
        let mut loglik = ExactSum::new();
        for s in subset.samples() {
            let sm = s.summary();
            let mm = sample_moments(theta, sm).map_err(|e| e.in_subset(subset.id))?;
            loglik.add(sample_loglik(theta, sm, &mm));
            let ebb = &mm.mean * mm.mean.transpose() + &mm.cov;
            stats.s_xzb.add_slice((&sm.xtz * &mm.mean).as_slice());
            stats.s_yzb.add(sm.zty.dot(&mm.mean));
            stats.s_zzbb.add(sm.ztz.component_mul(&ebb).sum());
            stats.s_bb.add_slice(ebb.as_slice());
        }
        if !loglik.value().is_finite() {
            return Err(Error::Domain {
                subset: Some(subset.id),
                reason: "non-finite log-likelihood".into(),
            });
        }
        Ok(EStep { stats, loglik })
    }

    fn cm_steps(&self, agg: &LmmStats, current: &Theta) -> Result<Theta> {
        agg.check_dims(self.p, self.q)?;
        self.check_theta(current)?;
        let m = agg.n_samples as f64;
        let n = agg.n_obs as f64;
        if agg.n_samples == 0 {
            return Err(Error::Protocol("M step on statistics of zero samples".into()));
        }

        // CM-1: β maximizes Q given (D, τ²); the maximizer does not depend on them.
        let xtx = agg.xtx();
        let rhs = agg.xty() - agg.xtzb();
        let singular = || Error::RankDeficient("fixed-effects design ΣXᵢᵀXᵢ is singular".into());
        let chol = xtx.clone().cholesky().ok_or_else(singular)?;
        let max_diag = xtx.diagonal().max();
        let min_pivot = chol.l_dirty().diagonal().min();
        if min_pivot.is_nan() || min_pivot * min_pivot <= 1e-12 * max_diag {
            return Err(singular());
        }
        let beta = chol.solve(&rhs);

        let rss = agg.rss_at(&beta);
        let sbb = agg.ebb();
        let tau2 = match self.cm_order {
            // CM-2: (D, τ²) jointly given β.
            CmOrder::Joint => rss / n,
            // CM-2a: τ² given the current D.
            CmOrder::Sequential => {
                let tr = solve_lower_pair(&current.chol, &sbb).trace();
                (rss + tr) / (n + m * self.q as f64)
            }
        };
        if !(tau2.is_finite() && tau2 > 0.0) {
            return Err(Error::domain(format!("M step produced tau2 = {tau2}")));
        }
        let d = sbb / (m * tau2);
        let l = cholesky_lower(&d)
            .ok_or_else(|| Error::domain("M step produced a D that is not positive definite"))?;
        Theta::new(beta, l, tau2)
    }

    fn local_kl(&self, theta_eval: &Theta, theta_anchor: &Theta, subset: &SubsetData) -> Result<f64> {
        self.check_theta(theta_eval)?;
        self.check_theta(theta_anchor)?;
        self.check_subset(subset)?;
        let mut acc = ExactSum::new();
        for s in subset.samples() {
            let sm = s.summary();
            let a = sample_moments(theta_anchor, sm).map_err(|e| e.in_subset(subset.id))?;
            let e = sample_moments(theta_eval, sm).map_err(|e| e.in_subset(subset.id))?;
            let kl = gaussian_kl(&a.mean, &a.cov, &e.mean, &e.cov).map_err(|e| e.in_subset(subset.id))?;
            acc.add(kl);
        }
        Ok(acc.value())
    }

    fn n_obs(&self, subset: &SubsetData) -> usize {
        subset.n_obs()
    }

    fn params_finite(&self, theta: &Theta) -> bool {
        theta.is_finite()
    }

    fn encode_params(&self, theta: &Theta) -> Vec<f64> {
        theta.to_vec()
    }

    fn decode_params(&self, data: &[f64]) -> Result<Theta> {
        Theta::from_vec(self.p, self.q, data)
    }

    fn encode_stats(&self, stats: &LmmStats) -> Vec<f64> {
        let mut out = Vec::new();
        stats.encode(&mut out);
        out
    }

    fn decode_stats(&self, data: &[f64]) -> Result<LmmStats> {
        LmmStats::decode(self.p, self.q, data)
    }
}
