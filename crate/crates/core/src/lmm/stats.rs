use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exact::{ExactSum, ExactVec};
use crate::model::Additive;

/// Additive E-step statistics of the mixed model over a set of samples.
///
/// With `b̂_i`, `Ĉ_i` the posterior moments at the anchor and
/// `E_i = b̂_i b̂_iᵀ + Ĉ_i`:
///
/// | field      | value                          |
/// |------------|--------------------------------|
/// | `s_xx`     | `Σ X_iᵀX_i` (p×p)              |
/// | `s_xy`     | `Σ X_iᵀy_i`                    |
/// | `s_yy`     | `Σ y_iᵀy_i`                    |
/// | `s_xzb`    | `Σ X_iᵀZ_i b̂_i`                |
/// | `s_yzb`    | `Σ y_iᵀZ_i b̂_i`                |
/// | `s_zzbb`   | `Σ tr(Z_iᵀZ_i E_i)`            |
/// | `s_bb`     | `Σ E_i` (q×q)                  |
///
/// The expected residual sum of squares at any `β` is then the quadratic
/// `s_yy − 2βᵀs_xy + βᵀs_xxβ − 2 s_yzb + 2βᵀs_xzb + s_zzbb`, which lets the M
/// step move `β` away from the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmStats {
    pub p: usize,
    pub q: usize,
    pub n_samples: u64,
    pub n_obs: u64,
    pub s_xx: ExactVec,
    pub s_xy: ExactVec,
    pub s_yy: ExactSum,
    pub s_xzb: ExactVec,
    pub s_yzb: ExactSum,
    pub s_zzbb: ExactSum,
    pub s_bb: ExactVec,
}

impl LmmStats {
    pub fn zeros(p: usize, q: usize) -> Self {
        LmmStats {
            p,
            q,
            n_samples: 0,
            n_obs: 0,
            s_xx: ExactVec::zeros(p * p),
            s_xy: ExactVec::zeros(p),
            s_yy: ExactSum::new(),
            s_xzb: ExactVec::zeros(p),
            s_yzb: ExactSum::new(),
            s_zzbb: ExactSum::new(),
            s_bb: ExactVec::zeros(q * q),
        }
    }

    pub fn xtx(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.p, self.p, &self.s_xx.values())
    }

    pub fn xty(&self) -> DVector<f64> {
        DVector::from_vec(self.s_xy.values())
    }

    pub fn xtzb(&self) -> DVector<f64> {
        DVector::from_vec(self.s_xzb.values())
    }

    pub fn ebb(&self) -> DMatrix<f64> {
        let m = DMatrix::from_column_slice(self.q, self.q, &self.s_bb.values());
        (&m + m.transpose()) * 0.5
    }

    /// Expected residual sum of squares `Σ E‖y_i − X_iβ − Z_ib_i‖²` at `beta`.
    pub fn rss_at(&self, beta: &DVector<f64>) -> f64 {
        let xtx = self.xtx();
        let mut acc = ExactSum::new();
        acc.merge(&self.s_yy);
        acc.add(-2.0 * beta.dot(&self.xty()));
        acc.add(beta.dot(&(&xtx * beta)));
        for _ in 0..2 {
            for part in self.s_yzb.partials() {
                acc.add(-part);
            }
        }
        acc.add(2.0 * beta.dot(&self.xtzb()));
        acc.merge(&self.s_zzbb);
        acc.value()
    }

    pub fn check_dims(&self, p: usize, q: usize) -> Result<()> {
        if self.p != p || self.q != q {
            return Err(Error::Dimension(format!(
                "statistics are for (p, q) = ({}, {}), model has ({p}, {q})",
                self.p, self.q
            )));
        }
        Ok(())
    }

    pub fn encode(&self, out: &mut Vec<f64>) {
        out.push(self.n_samples as f64);
        out.push(self.n_obs as f64);
        self.s_xx.encode(out);
        self.s_xy.encode(out);
        self.s_yy.encode(out);
        self.s_xzb.encode(out);
        self.s_yzb.encode(out);
        self.s_zzbb.encode(out);
        self.s_bb.encode(out);
    }

    pub fn decode(p: usize, q: usize, data: &[f64]) -> Result<Self> {
        let bad = || Error::Format("truncated or malformed LMM statistics payload".into());
        let mut view = data;
        if view.len() < 2 {
            return Err(bad());
        }
        let count = |v: f64| (v >= 0.0 && v.fract() == 0.0).then_some(v as u64);
        let n_samples = count(view[0]).ok_or_else(bad)?;
        let n_obs = count(view[1]).ok_or_else(bad)?;
        view = &view[2..];
        let s_xx = ExactVec::decode(p * p, &mut view).ok_or_else(bad)?;
        let s_xy = ExactVec::decode(p, &mut view).ok_or_else(bad)?;
        let s_yy = ExactSum::decode(&mut view).ok_or_else(bad)?;
        let s_xzb = ExactVec::decode(p, &mut view).ok_or_else(bad)?;
        let s_yzb = ExactSum::decode(&mut view).ok_or_else(bad)?;
        let s_zzbb = ExactSum::decode(&mut view).ok_or_else(bad)?;
        let s_bb = ExactVec::decode(q * q, &mut view).ok_or_else(bad)?;
        if !view.is_empty() {
            return Err(bad());
        }
        Ok(LmmStats {
            p,
            q,
            n_samples,
            n_obs,
            s_xx,
            s_xy,
            s_yy,
            s_xzb,
            s_yzb,
            s_zzbb,
            s_bb,
        })
    }
}

impl Additive for LmmStats {
    fn combine(&mut self, other: &Self) {
        debug_assert_eq!((self.p, self.q), (other.p, other.q));
        self.n_samples += other.n_samples;
        self.n_obs += other.n_obs;
        self.s_xx.merge(&other.s_xx);
        self.s_xy.merge(&other.s_xy);
        self.s_yy.merge(&other.s_yy);
        self.s_xzb.merge(&other.s_xzb);
        self.s_yzb.merge(&other.s_yzb);
        self.s_zzbb.merge(&other.s_zzbb);
        self.s_bb.merge(&other.s_bb);
    }
}
