//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's numerical routines; only the plain data types are used.
#![allow(dead_code)]

use std::f64::consts::PI;

use dem_core::lmm::{Sample, SubsetData, Theta};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Explicit inverse through LU, fine for the tiny matrices used here.
pub fn inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().lu().try_inverse().expect("invertible test matrix")
}

pub fn logdet(a: &DMatrix<f64>) -> f64 {
    let det = a.clone().lu().determinant();
    assert!(det > 0.0, "matrix is not positive definite");
    det.ln()
}

/// Posterior of `b` given `y` by conditioning the explicit joint Gaussian of
/// `(b, y)` assembled as one `(q + n)`-dimensional covariance.
pub fn joint_posterior(theta: &Theta, s: &Sample) -> (DVector<f64>, DMatrix<f64>) {
    let (n, q) = (s.n_obs(), theta.q());
    let sigma = theta.sigma();
    let z = s.z();
    let mut joint = DMatrix::zeros(q + n, q + n);
    joint.view_mut((0, 0), (q, q)).copy_from(&sigma);
    let cross = &sigma * z.transpose();
    joint.view_mut((0, q), (q, n)).copy_from(&cross);
    joint.view_mut((q, 0), (n, q)).copy_from(&cross.transpose());
    let vy = z * &sigma * z.transpose() + DMatrix::identity(n, n) * theta.tau2;
    joint.view_mut((q, q), (n, n)).copy_from(&vy);

    let s_by = joint.view((0, q), (q, n)).into_owned();
    let s_yy_inv = inverse(&joint.view((q, q), (n, n)).into_owned());
    let resid = s.y() - s.x() * &theta.beta;
    let mean = &s_by * &s_yy_inv * resid;
    let cov = joint.view((0, 0), (q, q)).into_owned() - &s_by * &s_yy_inv * s_by.transpose();
    (mean, cov)
}

/// Marginal Gaussian log-density of one sample from the dense covariance
/// `τ²(Z D Zᵀ + I)`.
pub fn dense_loglik(theta: &Theta, s: &Sample) -> f64 {
    let n = s.n_obs();
    let v = s.z() * theta.sigma() * s.z().transpose() + DMatrix::identity(n, n) * theta.tau2;
    let r = s.y() - s.x() * &theta.beta;
    let quad = (r.transpose() * inverse(&v) * &r)[(0, 0)];
    -0.5 * (n as f64 * (2.0 * PI).ln() + logdet(&v) + quad)
}

pub fn dense_loglik_all(theta: &Theta, samples: &[Sample]) -> f64 {
    samples.iter().map(|s| dense_loglik(theta, s)).sum()
}

pub fn random_theta(r: &mut ChaCha8Rng, p: usize, q: usize) -> Theta {
    let beta = DVector::from_fn(p, |_, _| r.random_range(-2.0..2.0));
    let mut l = DMatrix::zeros(q, q);
    for i in 0..q {
        l[(i, i)] = r.random_range(0.4..1.6);
        for j in 0..i {
            l[(i, j)] = r.random_range(-0.6..0.6);
        }
    }
    Theta::new(beta, l, r.random_range(0.3..2.5)).unwrap()
}

pub fn random_sample(r: &mut ChaCha8Rng, n: usize, p: usize, q: usize) -> Sample {
    let x = DMatrix::from_fn(n, p, |_, _| r.random_range(-1.5..1.5));
    let z = DMatrix::from_fn(n, q, |_, _| r.random_range(-1.5..1.5));
    let y = DVector::from_fn(n, |_, _| r.random_range(-3.0..3.0));
    Sample::new(y, x, z).unwrap()
}

pub fn random_subset(r: &mut ChaCha8Rng, id: usize, m: usize, max_n: usize, p: usize, q: usize) -> SubsetData {
    let samples = (0..m)
        .map(|_| {
            let n = r.random_range(1..=max_n);
            random_sample(r, n, p, q)
        })
        .collect();
    SubsetData::new(id, samples).unwrap()
}

/// Nelder–Mead minimization with restarts until a restart no longer improves
/// the value.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let mut best = x0.to_vec();
    let mut best_val = f(&best);
    let mut scale = step;
    for _ in 0..30 {
        let (x, v) = nm_once(&f, &best, scale, max_evals);
        let improved = best_val - v > 1e-15 * (1.0 + v.abs());
        if v <= best_val {
            best = x;
            best_val = v;
        }
        if !improved && scale < step * 1e-3 {
            break;
        }
        scale = (scale * 0.3).max(1e-9);
    }
    (best, best_val)
}

fn nm_once<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut evals = d + 1;
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=d).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let spread = (vals[d] - vals[0]).abs();
        let size = simplex
            .iter()
            .skip(1)
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= 1e-16 * (1.0 + vals[0].abs()) && size < 1e-12 {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
                evals += d;
            }
        }
    }
    let mut best = 0;
    for i in 1..=d {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    (simplex[best].clone(), vals[best])
}

/// Composite Gauss–Legendre (5 points per panel) over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let mid = a + (k as f64 + 0.5) * h;
        for (x, w) in X.iter().zip(W) {
            total += w * f(mid + 0.5 * h * x);
        }
    }
    total * 0.5 * h
}

pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

/// KL between two 1-D Gaussians by quadrature of `p log(p / q)`.
pub fn kl_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let sd = v1.sqrt();
    integrate(
        |x| {
            let lp = normal_logpdf(x, m1, v1);
            lp.exp() * (lp - normal_logpdf(x, m2, v2))
        },
        m1 - 14.0 * sd,
        m1 + 14.0 * sd,
        400,
    )
}

/// Central-difference gradient with a fixed relative step.
pub fn gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Map unconstrained coordinates `(β, vech L with log diagonal, log τ²)` to
/// a parameter, written independently of the crate's own mapping.
pub fn theta_from_coords(p: usize, q: usize, u: &[f64]) -> Theta {
    let beta = DVector::from_column_slice(&u[..p]);
    let mut l = DMatrix::zeros(q, q);
    let mut k = p;
    for j in 0..q {
        for i in j..q {
            l[(i, j)] = if i == j { u[k].exp() } else { u[k] };
            k += 1;
        }
    }
    Theta::new(beta, l, u[k].exp()).unwrap()
}

pub fn coords_from_theta(t: &Theta) -> Vec<f64> {
    let (p, q) = (t.p(), t.q());
    let mut u: Vec<f64> = t.beta.iter().copied().collect();
    for j in 0..q {
        for i in j..q {
            u.push(if i == j { t.chol[(i, j)].ln() } else { t.chol[(i, j)] });
        }
    }
    u.push(t.tau2.ln());
    assert_eq!(u.len(), p + q * (q + 1) / 2 + 1);
    u
}

/// Mean and variance of a binomial proportion band `p ± 3σ` for `t` trials.
pub fn binomial_band(p: f64, t: usize) -> (f64, f64) {
    let sd = (p * (1.0 - p) / t as f64).sqrt();
    (p - 3.0 * sd, p + 3.0 * sd)
}
