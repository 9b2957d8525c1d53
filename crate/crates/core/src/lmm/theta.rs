use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// LMM parameter point `{β, L, τ²}` with `D = L Lᵀ` and random-effects
/// covariance `Σ = τ² D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    /// Lower-triangular factor of `D` with a positive diagonal.
    pub chol: DMatrix<f64>,
    pub tau2: f64,
}

impl Theta {
    pub fn new(beta: DVector<f64>, chol: DMatrix<f64>, tau2: f64) -> Result<Self> {
        let theta = Theta { beta, chol, tau2 };
        theta.validate()?;
        Ok(theta)
    }

    /// Build from `D` directly; fails when `D` is not positive definite.
    pub fn from_d(beta: DVector<f64>, d: &DMatrix<f64>, tau2: f64) -> Result<Self> {
        let chol = cholesky_lower(d).ok_or_else(|| Error::domain("D is not positive definite"))?;
        Theta::new(beta, chol, tau2)
    }

    /// `β = 0`, `D = I`, `τ² = 10`.
    pub fn starting(p: usize, q: usize) -> Self {
        Theta {
            beta: DVector::zeros(p),
            chol: DMatrix::identity(q, q),
            tau2: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.chol.nrows();
        if self.chol.ncols() != q {
            return Err(Error::Dimension(format!(
                "Cholesky factor is {}x{}",
                self.chol.nrows(),
                self.chol.ncols()
            )));
        }
        if !(self.tau2.is_finite() && self.tau2 > 0.0) {
            return Err(Error::domain(format!("tau2 = {} is not positive", self.tau2)));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::domain("beta has non-finite entries"));
        }
        for i in 0..q {
            if !(self.chol[(i, i)].is_finite() && self.chol[(i, i)] > 0.0) {
                return Err(Error::domain(format!(
                    "Cholesky diagonal entry {i} = {} is not positive",
                    self.chol[(i, i)]
                )));
            }
            for j in 0..q {
                let v = self.chol[(i, j)];
                if !v.is_finite() || (j > i && v != 0.0) {
                    return Err(Error::domain("Cholesky factor is not lower triangular"));
                }
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.chol.nrows()
    }

    pub fn d(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        self.d() * self.tau2
    }

    pub fn is_finite(&self) -> bool {
        self.tau2.is_finite()
            && self.beta.iter().all(|v| v.is_finite())
            && self.chol.iter().all(|v| v.is_finite())
    }

    /// Length of the flattened parameter `(β, vech(L), τ²)`.
    pub fn dim(p: usize, q: usize) -> usize {
        p + q * (q + 1) / 2 + 1
    }

    /// `(β, vech(L), τ²)` with `vech` stacking the lower triangle column by
    /// column.
    pub fn to_vec(&self) -> Vec<f64> {
        let q = self.q();
        let mut out = Vec::with_capacity(Self::dim(self.p(), q));
        out.extend(self.beta.iter());
        for j in 0..q {
            for i in j..q {
                out.push(self.chol[(i, j)]);
            }
        }
        out.push(self.tau2);
        out
    }

    pub fn from_vec(p: usize, q: usize, v: &[f64]) -> Result<Self> {
        if v.len() != Self::dim(p, q) {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                Self::dim(p, q)
            )));
        }
        let beta = DVector::from_column_slice(&v[..p]);
        let mut chol = DMatrix::zeros(q, q);
        let mut idx = p;
        for j in 0..q {
            for i in j..q {
                chol[(i, j)] = v[idx];
                idx += 1;
            }
        }
        Theta::new(beta, chol, v[idx])
    }

    /// Unconstrained coordinates `(β, vech(L) with log diagonal, log τ²)`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let q = self.q();
        let mut out = Vec::with_capacity(Self::dim(self.p(), q));
        out.extend(self.beta.iter());
        for j in 0..q {
            for i in j..q {
                let v = self.chol[(i, j)];
                out.push(if i == j { v.ln() } else { v });
            }
        }
        out.push(self.tau2.ln());
        out
    }

    pub fn from_unconstrained(p: usize, q: usize, u: &[f64]) -> Result<Self> {
        if u.len() != Self::dim(p, q) {
            return Err(Error::Dimension(format!(
                "unconstrained vector has length {}, expected {}",
                u.len(),
                Self::dim(p, q)
            )));
        }
        let beta = DVector::from_column_slice(&u[..p]);
        let mut chol = DMatrix::zeros(q, q);
        let mut idx = p;
        for j in 0..q {
            for i in j..q {
                chol[(i, j)] = if i == j { u[idx].exp() } else { u[idx] };
                idx += 1;
            }
        }
        Theta::new(beta, chol, u[idx].exp())
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sym = (a + a.transpose()) * 0.5;
    sym.cholesky().map(|c| c.l())
}

/// JSON-friendly view of a parameter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub beta: Vec<f64>,
    /// `D` row by row.
    pub d: Vec<Vec<f64>>,
    pub tau2: f64,
    /// `Σ = τ² D` row by row.
    pub sigma: Vec<Vec<f64>>,
}

impl From<&Theta> for ThetaRecord {
    fn from(t: &Theta) -> Self {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        ThetaRecord {
            beta: t.beta.iter().copied().collect(),
            d: rows(&t.d()),
            tau2: t.tau2,
            sigma: rows(&t.sigma()),
        }
    }
}

impl TryFrom<&ThetaRecord> for Theta {
    type Error = Error;

    fn try_from(r: &ThetaRecord) -> Result<Theta> {
        let q = r.d.len();
        if r.d.iter().any(|row| row.len() != q) {
            return Err(Error::Dimension("D is not square".into()));
        }
        let d = DMatrix::from_fn(q, q, |i, j| r.d[i][j]);
        Theta::from_d(DVector::from_vec(r.beta.clone()), &d, r.tau2)
    }
}
