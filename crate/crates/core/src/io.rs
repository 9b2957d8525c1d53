//! Dataset files: a little-endian binary body plus a JSON sidecar at
//! `<path>.json`.
//!
//! Body layout: magic `DEMD1`, then `m`, `p`, `q` as u64, then per sample
//! `n_i` as u64 followed by `y` (n_i f64), `X` column-major (n_i·p f64) and
//! `Z` column-major (n_i·q f64).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{Dataset, Sample, ThetaRecord};

pub const DATASET_MAGIC: &[u8; 5] = b"DEMD1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub seed: Option<u64>,
    /// Generating parameter for simulated data.
    pub truth: Option<ThetaRecord>,
    /// Free-form origin, e.g. `simulate` or `ingest:<file>`.
    pub source: String,
    /// Column names of `X` (and `Z` when identical), if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
}

impl DatasetMeta {
    pub fn for_dataset(dataset: &Dataset, source: impl Into<String>) -> Self {
        DatasetMeta {
            format_version: FORMAT_VERSION,
            m: dataset.n_samples(),
            n: dataset.n_obs(),
            p: dataset.p,
            q: dataset.q,
            seed: None,
            truth: None,
            source: source.into(),
            columns: None,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<'a>(w: &mut impl Write, vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn dim(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
}

pub fn write_dataset_body(w: &mut impl Write, dataset: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u64(w, dataset.n_samples() as u64)?;
    put_u64(w, dataset.p as u64)?;
    put_u64(w, dataset.q as u64)?;
    for s in &dataset.samples {
        put_u64(w, s.n_obs() as u64)?;
        put_f64s(w, s.y().iter())?;
        put_f64s(w, s.x().iter())?;
        put_f64s(w, s.z().iter())?;
    }
    Ok(())
}

pub fn read_dataset_body(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let m = dim(get_u64(r)?, "sample count")?;
    let p = dim(get_u64(r)?, "p")?;
    let q = dim(get_u64(r)?, "q")?;
    let mut samples = Vec::with_capacity(m.min(1 << 20));
    for _ in 0..m {
        let ni = dim(get_u64(r)?, "sample size")?;
        let y = DVector::from_vec(get_f64s(r, ni)?);
        let x = DMatrix::from_vec(ni, p, get_f64s(r, ni * p)?);
        let z = DMatrix::from_vec(ni, q, get_f64s(r, ni * q)?);
        samples.push(Sample::new(y, x, z)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last sample".into()));
    }
    Dataset::new(samples)
}

/// Write the body to `path` and the sidecar to `<path>.json`.
pub fn write_dataset(path: &Path, dataset: &Dataset, meta: &DatasetMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_body(&mut w, dataset)?;
    w.flush()?;
    let side = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(side, meta)?;
    Ok(())
}

/// Read a dataset and its sidecar, checking that they agree. A missing
/// sidecar is tolerated and replaced by one derived from the body.
pub fn read_dataset(path: &Path) -> Result<(Dataset, DatasetMeta)> {
    let dataset = read_dataset_body(&mut BufReader::new(File::open(path)?))?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(&side)?))?;
        if (meta.m, meta.n, meta.p, meta.q)
            != (dataset.n_samples(), dataset.n_obs(), dataset.p, dataset.q)
        {
            return Err(Error::Format(format!(
                "sidecar {} disagrees with the dataset dimensions",
                side.display()
            )));
        }
        meta
    } else {
        DatasetMeta::for_dataset(&dataset, path.display().to_string())
    };
    Ok((dataset, meta))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{simulate, SimDesign};

    #[test]
    fn body_roundtrip_is_bit_exact() {
        let sim = simulate(&SimDesign::new(7, 40, 3, 3, 9)).unwrap();
        let mut buf = Vec::new();
        write_dataset_body(&mut buf, &sim.dataset).unwrap();
        let back = read_dataset_body(&mut buf.as_slice()).unwrap();
        for (a, b) in sim.dataset.samples.iter().zip(&back.samples) {
            assert_eq!(a.y(), b.y());
            assert_eq!(a.x(), b.x());
            assert_eq!(a.z(), b.z());
        }
        buf.push(0);
        assert!(read_dataset_body(&mut buf.as_slice()).is_err());
        assert!(read_dataset_body(&mut &buf[..20]).is_err());
    }
}
