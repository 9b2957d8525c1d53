//! Small numerical helpers: central finite differences and eigenvalues of
//! `A⁻¹B` for symmetric `A ≻ 0`, `B`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Step used for coordinate `x`: `1e-5 · (1 + |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient<F>(f: F, x: &[f64]) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    let mut pt = x.to_vec();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        pt[j] = x[j] + h;
        let fp = f(&pt)?;
        pt[j] = x[j] - h;
        let fm = f(&pt)?;
        pt[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Hessian of `f` at `x`, symmetrized. Diagonal entries
/// use the three-point rule, off-diagonal entries the four-point rule.
pub fn fd_hessian<F>(f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let d = x.len();
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v)).collect();
    let f0 = f(x)?;
    let mut pt = x.to_vec();
    let mut eval = |moves: &[(usize, f64)]| -> Result<f64> {
        for &(j, s) in moves {
            pt[j] = x[j] + s * h[j];
        }
        let v = f(&pt);
        for &(j, _) in moves {
            pt[j] = x[j];
        }
        v
    };
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let fp = eval(&[(i, 1.0)])?;
        let fm = eval(&[(i, -1.0)])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = eval(&[(i, 1.0), (j, 1.0)])?;
            let fpm = eval(&[(i, 1.0), (j, -1.0)])?;
            let fmp = eval(&[(i, -1.0), (j, 1.0)])?;
            let fmm = eval(&[(i, -1.0), (j, -1.0)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Ascending eigenvalues of `A⁻¹B` through the congruent symmetric matrix
/// `L⁻¹ B L⁻ᵀ` with `A = L Lᵀ`. They are real whenever `A ≻ 0` and `B` is
/// symmetric.
pub fn generalized_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sym_a = (a + a.transpose()) * 0.5;
    let l = sym_a
        .cholesky()
        .ok_or_else(|| Error::domain("matrix is not positive definite"))?
        .l();
    let sym_b = (b + b.transpose()) * 0.5;
    let y = l
        .solve_lower_triangular(&sym_b)
        .ok_or_else(|| Error::domain("singular Cholesky factor"))?;
    let w = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::domain("singular Cholesky factor"))?;
    Ok(sym_eigenvalues(&w))
}
