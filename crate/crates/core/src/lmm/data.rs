use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exact::{ExactSum, ExactVec};

/// Cross-products of one sample, computed once at construction so the E step
/// costs `O(p q + q³)` per sample regardless of `n_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub n: usize,
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub yty: f64,
    pub ztz: DMatrix<f64>,
    pub zty: DVector<f64>,
    pub xtz: DMatrix<f64>,
}

/// One sample `(y_i, X_i, Z_i)` of the mixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    summary: SampleSummary,
}

impl Sample {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Dimension("sample has no observations".into()));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {n} rows but X has {} and Z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("sample contains non-finite values"));
        }
        let xt = x.transpose();
        let zt = z.transpose();
        let summary = SampleSummary {
            n,
            xtx: &xt * &x,
            xty: &xt * &y,
            yty: y.dot(&y),
            ztz: &zt * &z,
            zty: &zt * &y,
            xtz: &xt * &z,
        };
        Ok(Sample { y, x, z, summary })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn summary(&self) -> &SampleSummary {
        &self.summary
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }
}

/// Parameter-free part of the E-step statistics of a subset.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FixedStats {
    pub xtx: ExactVec,
    pub xty: ExactVec,
    pub yty: ExactSum,
}

/// The samples stored on one worker.
#[derive(Debug, Clone)]
pub struct SubsetData {
    pub id: usize,
    samples: Vec<Sample>,
    n_obs: usize,
    p: usize,
    q: usize,
    pub(crate) fixed: FixedStats,
}

impl SubsetData {
    pub fn new(id: usize, samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dimension(format!("subset {id} is empty")))?;
        let (p, q) = (first.p(), first.q());
        if samples.iter().any(|s| s.p() != p || s.q() != q) {
            return Err(Error::Dimension(format!(
                "subset {id} mixes samples with different (p, q)"
            )));
        }
        let mut fixed = FixedStats {
            xtx: ExactVec::zeros(p * p),
            xty: ExactVec::zeros(p),
            yty: ExactSum::new(),
        };
        for s in &samples {
            let sm = s.summary();
            fixed.xtx.add_slice(sm.xtx.as_slice());
            fixed.xty.add_slice(sm.xty.as_slice());
            fixed.yty.add(sm.yty);
        }
        let n_obs = samples.iter().map(Sample::n_obs).sum();
        Ok(SubsetData {
            id,
            samples,
            n_obs,
            p,
            q,
            fixed,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }
}

/// A full dataset: every sample with shared `(p, q)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub p: usize,
    pub q: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dimension("dataset is empty".into()))?;
        let (p, q) = (first.p(), first.q());
        if samples.iter().any(|s| s.p() != p || s.q() != q) {
            return Err(Error::Dimension("samples disagree on (p, q)".into()));
        }
        Ok(Dataset { p, q, samples })
    }

    pub fn n_obs(&self) -> usize {
        self.samples.iter().map(Sample::n_obs).sum()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// The whole dataset as a single subset (id 0).
    pub fn as_single_subset(&self) -> Result<SubsetData> {
        SubsetData::new(0, self.samples.clone())
    }
}
