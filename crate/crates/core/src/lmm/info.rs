//! Observed- and complete-data information matrices at a converged point and
//! the speed matrices built from them.
//!
//! All matrices live in the unconstrained coordinates
//! `(β, vech(L) with log diagonal, log τ²)`. For a split of the subsets into
//! `A` and its complement, `i_obs_A` is the negative Hessian of
//! `Σ_{k∈A} L_k` and `i_com_A` the negative Hessian of the Q function
//! rebuilt from the E-step statistics of `A` at `θ̂`. The full-data matrices
//! are the sums of the two groups.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{LmmModel, LmmStats, SubsetData, Theta};
use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::linalg::{fd_gradient, fd_hessian, generalized_eigenvalues, sym_eigenvalues};
use crate::model::{Additive, EmModel};

#[derive(Debug, Clone)]
pub struct InformationMatrices {
    pub i_obs: DMatrix<f64>,
    pub i_com: DMatrix<f64>,
    pub i_obs_a: DMatrix<f64>,
    pub i_com_a: DMatrix<f64>,
    pub i_obs_ac: DMatrix<f64>,
    pub i_com_ac: DMatrix<f64>,
    /// Euclidean norm of the finite-difference gradient of the full
    /// log-likelihood at `θ̂`.
    pub gradient_norm: f64,
    pub warnings: Vec<String>,
}

fn group_loglik(
    model: &LmmModel,
    subsets: &[&SubsetData],
    u: &[f64],
) -> Result<f64> {
    let theta = Theta::from_unconstrained(model.p, model.q, u)?;
    let mut acc = ExactSum::new();
    for s in subsets {
        acc.merge(&model.local_loglik_parts(&theta, s)?);
    }
    Ok(acc.value())
}

fn group_stats(model: &LmmModel, subsets: &[&SubsetData], theta: &Theta) -> Result<LmmStats> {
    let mut stats = LmmStats::zeros(model.p, model.q);
    for s in subsets {
        stats.combine(&model.local_estep(theta, s)?.stats);
    }
    Ok(stats)
}

fn group_blocks(
    model: &LmmModel,
    subsets: &[&SubsetData],
    theta: &Theta,
    u: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let dim = u.len();
    if subsets.is_empty() {
        return Ok((DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim)));
    }
    let i_obs = -fd_hessian(|v| group_loglik(model, subsets, v), u)?;
    let stats = group_stats(model, subsets, theta)?;
    let i_com = -fd_hessian(
        |v| {
            let t = Theta::from_unconstrained(model.p, model.q, v)?;
            model.q_value(&stats, &t)
        },
        u,
    )?;
    Ok((i_obs, i_com))
}

/// Information matrices at `theta_hat` for the split `in_a` (subset ids in
/// group `A`).
pub fn information_matrices(
    model: &LmmModel,
    theta_hat: &Theta,
    subsets: &[SubsetData],
    in_a: &[usize],
) -> Result<InformationMatrices> {
    if in_a.is_empty() {
        return Err(Error::Config("split group A is empty".into()));
    }
    if let Some(&bad) = in_a.iter().find(|&&k| k >= subsets.len()) {
        return Err(Error::Config(format!(
            "split names subset {bad} but only {} exist",
            subsets.len()
        )));
    }
    let mut a = Vec::new();
    let mut ac = Vec::new();
    for (k, s) in subsets.iter().enumerate() {
        if in_a.contains(&k) {
            a.push(s);
        } else {
            ac.push(s);
        }
    }

    let u = theta_hat.to_unconstrained();
    let (i_obs_a, i_com_a) = group_blocks(model, &a, theta_hat, &u)?;
    let (i_obs_ac, i_com_ac) = group_blocks(model, &ac, theta_hat, &u)?;
    let i_obs = &i_obs_a + &i_obs_ac;
    let i_com = &i_com_a + &i_com_ac;

    let all: Vec<&SubsetData> = subsets.iter().collect();
    let gradient_norm = fd_gradient(|v| group_loglik(model, &all, v), &u)?.norm();

    let mut warnings = Vec::new();
    if gradient_norm > 1e-4 {
        warnings.push(format!(
            "log-likelihood gradient norm {gradient_norm:.3e} exceeds 1e-4; the point may not be stationary"
        ));
    }
    if sym_eigenvalues(&i_com).first().is_some_and(|&v| v <= 0.0) {
        warnings.push("complete-data information is not positive definite".into());
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(InformationMatrices {
        i_obs,
        i_com,
        i_obs_a,
        i_com_a,
        i_obs_ac,
        i_com_ac,
        gradient_norm,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSummary {
    pub min: f64,
    pub max: f64,
}

impl EigenSummary {
    fn of(values: &[f64]) -> Self {
        EigenSummary {
            min: values.first().copied().unwrap_or(0.0),
            max: values.last().copied().unwrap_or(0.0),
        }
    }
}

/// Speed matrices, the decomposition residual and the eigenvalue bounds.
///
/// Eigenvalues are those of the (real-spectrum) products `a⁻¹b` with
/// `a ≻ 0`.
#[derive(Debug, Clone)]
pub struct SpeedReport {
    pub s_em: DMatrix<f64>,
    pub s_dem: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub eig_s_em: EigenSummary,
    pub eig_s_dem: EigenSummary,
    pub eig_c: EigenSummary,
    pub eig_o: EigenSummary,
    /// `‖S_EM − (I + C)⁻¹S_DEM − O‖_F / ‖S_EM‖_F`.
    pub identity_residual: f64,
    pub identity_ok: bool,
    /// `λ_min(S_DEM) / (1 + λ_max(C)) + λ_min(O)`.
    pub lower_bound: f64,
    /// `λ_min(S_DEM) / (1 + λ_min(C)) + λ_min(O)`.
    pub upper_bound: f64,
    /// `λ_max(S_DEM) / (1 + λ_min(C)) + λ_min(O)`, which always dominates
    /// `λ_min(S_EM)` when `i_obs_A ⪰ 0`.
    pub upper_bound_max: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// `λ_min(S_EM) − λ_min(O) ≤ λ_min(S_DEM) + tol`.
    pub gap_ok: bool,
    /// Lower and upper bound both hold within `tol`.
    pub eigen_bounds_ok: bool,
    /// The same two bounds with extreme singular values in place of
    /// eigenvalues.
    pub sv_s_em: EigenSummary,
    pub sv_s_dem: EigenSummary,
    pub sv_c: EigenSummary,
    pub sv_o: EigenSummary,
    pub sv_lower_ok: bool,
    pub sv_upper_ok: bool,
    pub tol: f64,
}

fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::domain(format!("{what} is not positive definite")))?;
    Ok(chol.solve(b))
}

pub fn speed_matrices(m: &InformationMatrices, tol: f64) -> Result<SpeedReport> {
    let dim = m.i_obs.nrows();
    let s_em = solve_spd(&m.i_com, &m.i_obs, "i_com")?;
    let s_dem = solve_spd(&m.i_com_a, &m.i_obs_a, "i_com_A")?;
    let c = solve_spd(&m.i_com_a, &m.i_com_ac, "i_com_A")?;
    let o = solve_spd(&m.i_com, &m.i_obs_ac, "i_com")?;

    let ipc = DMatrix::identity(dim, dim) + &c;
    let recon = ipc
        .clone()
        .lu()
        .solve(&s_dem)
        .ok_or_else(|| Error::domain("I + C is singular"))?
        + &o;
    let scale = s_em.norm();
    let identity_residual = if scale > 0.0 {
        (&s_em - recon).norm() / scale
    } else {
        (&s_em - recon).norm()
    };

    let eig_s_em = EigenSummary::of(&generalized_eigenvalues(&m.i_com, &m.i_obs)?);
    let eig_s_dem = EigenSummary::of(&generalized_eigenvalues(&m.i_com_a, &m.i_obs_a)?);
    let eig_c = EigenSummary::of(&generalized_eigenvalues(&m.i_com_a, &m.i_com_ac)?);
    let eig_o = EigenSummary::of(&generalized_eigenvalues(&m.i_com, &m.i_obs_ac)?);

    let lower_bound = eig_s_dem.min / (1.0 + eig_c.max) + eig_o.min;
    let upper_bound = eig_s_dem.min / (1.0 + eig_c.min) + eig_o.min;
    let upper_bound_max = eig_s_dem.max / (1.0 + eig_c.min) + eig_o.min;
    let lower_ok = lower_bound <= eig_s_em.min + tol;
    let upper_ok = eig_s_em.min <= upper_bound + tol;
    let gap_ok = eig_s_em.min - eig_o.min <= eig_s_dem.min + tol;
    let identity_ok = identity_residual < 1e-6;

    let sv = |a: &DMatrix<f64>| {
        let mut v: Vec<f64> = a.clone().singular_values().iter().copied().collect();
        v.sort_by(f64::total_cmp);
        EigenSummary::of(&v)
    };
    let (sv_s_em, sv_s_dem, sv_c, sv_o) = (sv(&s_em), sv(&s_dem), sv(&c), sv(&o));
    let sv_lower_ok = sv_s_dem.min / (1.0 + sv_c.max) + sv_o.min <= sv_s_em.min + tol;
    let sv_upper_ok = sv_s_em.min <= sv_s_dem.min / (1.0 + sv_c.min) + sv_o.min + tol;
    Ok(SpeedReport {
        s_em,
        s_dem,
        c,
        o,
        eig_s_em,
        eig_s_dem,
        eig_c,
        eig_o,
        identity_residual,
        identity_ok,
        lower_bound,
        upper_bound,
        upper_bound_max,
        lower_ok,
        upper_ok,
        gap_ok,
        eigen_bounds_ok: lower_ok && upper_ok,
        sv_s_em,
        sv_s_dem,
        sv_c,
        sv_o,
        sv_lower_ok,
        sv_upper_ok,
        tol,
    })
}
