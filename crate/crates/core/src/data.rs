//! Random-label dataset for the memorization study: points uniform in the
//! unit cube `[0,1)^d`, labels uniform over `m` classes, fully determined by
//! `(n, d, m, seed)`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{PkmError, Result};
use crate::numerics::{DenseMatrix, Rng};

const DUMP_MAGIC: &[u8; 4] = b"PKMD";
const DUMP_VERSION: u32 = 1;
/// RNG stream used for the training points.
const TRAIN_STREAM: u64 = 0xDA7A;
const HOLDOUT_STREAM: u64 = 0xDA7B;

fn default_d() -> usize {
    8
}
fn default_m() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Overrides the run seed for data generation.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Size of an optional held-out set; 0 evaluates on the training set.
    #[serde(default)]
    pub holdout: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomLabelDataset {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub points: DenseMatrix,
    pub labels: Vec<usize>,
}

impl RandomLabelDataset {
    pub fn generate(n: usize, d: usize, m: usize, seed: u64) -> Result<Self> {
        Self::generate_stream(n, d, m, seed, TRAIN_STREAM)
    }

    /// Independent points and labels from another stream of the same seed.
    pub fn generate_holdout(n: usize, d: usize, m: usize, seed: u64) -> Result<Self> {
        Self::generate_stream(n, d, m, seed, HOLDOUT_STREAM)
    }

    fn generate_stream(n: usize, d: usize, m: usize, seed: u64, stream: u64) -> Result<Self> {
        if n == 0 || m == 0 || d == 0 {
            return Err(PkmError::Config(format!(
                "dataset needs n, d, m >= 1 (got {n}, {d}, {m})"
            )));
        }
        if m > u16::MAX as usize + 1 {
            return Err(PkmError::Config(format!("at most 65536 classes, got {m}")));
        }
        let mut rng = Rng::with_stream(seed, stream);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            // coordinates are exactly representable in f32 so dumps are lossless
            data.extend((0..d).map(|_| rng.uniform() as f32 as f64));
            labels.push(rng.below(m));
        }
        Ok(Self {
            n,
            d,
            m,
            seed,
            points: DenseMatrix::from_vec(n, d, data)?,
            labels,
        })
    }

    /// Number of points that repeat an earlier point exactly.
    pub fn duplicate_count(&self) -> usize {
        let mut seen = HashSet::with_capacity(self.n);
        (0..self.n)
            .filter(|&r| {
                let key: Vec<u64> = self.points.row(r).iter().map(|v| v.to_bits()).collect();
                !seen.insert(key)
            })
            .count()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.m];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (DenseMatrix, Vec<usize>) {
        (
            self.points.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Header (`PKMD`, version, n, d, m as u32, seed as u64), f32 rows, u16
    /// labels; little-endian throughout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        w.bytes(DUMP_MAGIC);
        w.u32(DUMP_VERSION);
        w.dim(self.n)?;
        w.dim(self.d)?;
        w.dim(self.m)?;
        w.u64(self.seed);
        w.f32s(self.points.as_slice());
        for &l in &self.labels {
            w.u16(l as u16);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DUMP_MAGIC {
            return Err(PkmError::Checkpoint {
                offset: 0,
                msg: "bad dataset magic".into(),
            });
        }
        let version = r.u32()?;
        if version != DUMP_VERSION {
            return Err(PkmError::UnsupportedVersion {
                found: version,
                expected: DUMP_VERSION,
            });
        }
        let (n, d, m) = (r.dim()?, r.dim()?, r.dim()?);
        let seed = r.u64()?;
        let points = DenseMatrix::from_vec(n, d, r.f32s(n * d)?)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = r.u16()? as usize;
            if l >= m {
                return r.error(format!("label {l} out of range for {m} classes"));
            }
            labels.push(l);
        }
        if r.remaining() != 0 {
            return r.error("trailing bytes");
        }
        Ok(Self {
            n,
            d,
            m,
            seed,
            points,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
