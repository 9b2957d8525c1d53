//! Simulated mixed-model data, sample-level partitioning, and ratings data.

mod movielens;

pub use movielens::{
    build_movielens_features, convert_colon_format, popularity, read_ratings_csv, synthetic_ratings,
    write_ratings_csv, RatingsDataset, RatingsDesign, RatingsRecord, SyntheticRatings, GENRES, MOVIELENS_COLUMNS,
};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{Dataset, Sample, SubsetData, Theta};

/// Simulation design. `sigma = None` selects the canonical random-effects
/// covariance, defined for `q ∈ {3, 6}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    /// Number of samples.
    pub m: usize,
    /// Total number of observations.
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
    pub tau2: f64,
    /// Custom `Σ` given row by row.
    pub sigma: Option<Vec<Vec<f64>>>,
}

impl SimDesign {
    pub fn new(m: usize, n: usize, p: usize, q: usize, seed: u64) -> Self {
        SimDesign {
            m,
            n,
            p,
            q,
            seed,
            tau2: 1.0,
            sigma: None,
        }
    }

    pub fn with_sigma(mut self, sigma: Vec<Vec<f64>>) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.sigma {
            None => canonical_sigma(self.q),
            Some(rows) => {
                if rows.len() != self.q || rows.iter().any(|r| r.len() != self.q) {
                    return Err(Error::Config(format!("custom sigma must be {0}x{0}", self.q)));
                }
                Ok(DMatrix::from_fn(self.q, self.q, |i, j| rows[i][j]))
            }
        }
    }

    /// The generating parameter: alternating `β`, `τ²`, and `D = Σ/τ²`.
    pub fn truth(&self) -> Result<Theta> {
        let sigma = self.sigma_matrix()?;
        Theta::from_d(beta_pattern(self.p), &(sigma / self.tau2), self.tau2)
            .map_err(|_| Error::Config("sigma is not positive definite".into()))
    }
}

/// `−2, 2, −2, …` of length `p`.
pub fn beta_pattern(p: usize) -> DVector<f64> {
    DVector::from_fn(p, |i, _| if i % 2 == 0 { -2.0 } else { 2.0 })
}

/// `V R V` with `V = diag(√1, √2, √3)` and correlations
/// `R₁₂ = −0.4, R₁₃ = 0.3, R₂₃ = 0.001`; block-diagonal pair for `q = 6`.
pub fn canonical_sigma(q: usize) -> Result<DMatrix<f64>> {
    let r = DMatrix::from_row_slice(3, 3, &[1.0, -0.4, 0.30, -0.4, 1.0, 0.001, 0.30, 0.001, 1.0]);
    let v = DMatrix::from_diagonal(&DVector::from_vec(vec![1f64.sqrt(), 2f64.sqrt(), 3f64.sqrt()]));
    let block = &v * r * &v;
    match q {
        3 => Ok(block),
        6 => {
            let mut s = DMatrix::zeros(6, 6);
            s.view_mut((0, 0), (3, 3)).copy_from(&block);
            s.view_mut((3, 3), (3, 3)).copy_from(&block);
            Ok(s)
        }
        _ => Err(Error::Config(format!(
            "the canonical covariance is defined for q = 3 or 6, not {q}; pass a custom sigma"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: Theta,
}

fn pm_one(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Draw a dataset from the mixed model. Each sample first gets one
/// observation; the remaining `n − m` are assigned to samples uniformly at
/// random. Covariates are iid ±1.
pub fn simulate(design: &SimDesign) -> Result<Simulated> {
    let SimDesign { m, n, p, q, .. } = *design;
    if m == 0 || n < m {
        return Err(Error::Config(format!("need n ≥ m ≥ 1, got m = {m}, n = {n}")));
    }
    if p == 0 || q == 0 {
        return Err(Error::Config("p and q must be positive".into()));
    }
    if !(design.tau2.is_finite() && design.tau2 > 0.0) {
        return Err(Error::Config("tau2 must be positive".into()));
    }
    let truth = design.truth()?;
    let sigma_chol = truth.chol.clone() * truth.tau2.sqrt();
    let tau = truth.tau2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);

    let mut sizes = vec![1usize; m];
    for _ in m..n {
        sizes[rng.random_range(0..m)] += 1;
    }
    let mut samples = Vec::with_capacity(m);
    for &ni in &sizes {
        let x = DMatrix::from_fn(ni, p, |_, _| pm_one(&mut rng));
        let z = DMatrix::from_fn(ni, q, |_, _| pm_one(&mut rng));
        let u = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = &sigma_chol * u;
        let e = DVector::from_fn(ni, |_, _| tau * rng.sample::<f64, _>(StandardNormal));
        let y = &x * &truth.beta + &z * b + e;
        samples.push(Sample::new(y, x, z)?);
    }
    Ok(Simulated {
        dataset: Dataset::new(samples)?,
        truth,
    })
}

/// Random sample-level split into `k` subsets: shuffle the samples, then
/// cut into contiguous blocks whose sizes differ by at most one.
pub fn partition(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<SubsetData>> {
    let m = dataset.n_samples();
    if k == 0 || k > m {
        return Err(Error::Config(format!("cannot split {m} samples into {k} subsets")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (m / k, m % k);
    let mut start = 0;
    (0..k)
        .map(|id| {
            let len = base + usize::from(id < extra);
            let part = order[start..start + len]
                .iter()
                .map(|&i| dataset.samples[i].clone())
                .collect();
            start += len;
            SubsetData::new(id, part)
        })
        .collect()
}
