//! Product-key memory layer.
//!
//! A query `q(x) = bn(proj(x))` of width `d_q` is split into `heads` chunks;
//! each chunk is split again into two halves that are scored against the
//! head's two half-key tables. The top-k of each half is combined over the
//! k×k candidate grid (combined score = sum of half scores) and the final
//! top-k slots of the shared [`ValueTable`] are mixed with softmax weights.
//! Head outputs are summed.

mod layer;
mod select;

pub use layer::{MemoryCache, MemoryGrads, MemoryLayer, MemoryOutput, QueryNetwork, Selection};
pub use select::{combine_topk, half_topk, score, score_grad, ScoredIndex, NORM_CLAMP};

use serde::{Deserialize, Serialize};

use crate::error::{PkmError, Result};
use crate::numerics::{DenseMatrix, Rng};

/// Similarity between a half-query and a half-key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Distance {
    /// `qᵀk`
    #[default]
    Dot,
    /// `‖q‖^α ‖k‖^α cos θ`; α = 1 recovers the dot product, α = 0 pure cosine.
    Cosine { alpha: f64 },
}

impl Distance {
    pub fn tag(&self) -> u32 {
        match self {
            Distance::Dot => 0,
            Distance::Cosine { .. } => 1,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Distance::Dot => 1.0,
            Distance::Cosine { alpha } => *alpha,
        }
    }

    pub fn from_tag(tag: u32, alpha: f64) -> Result<Self> {
        match tag {
            0 => Ok(Distance::Dot),
            1 => Ok(Distance::Cosine { alpha }),
            t => Err(PkmError::Config(format!("unknown distance tag {t}"))),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_bn_eps() -> f64 {
    crate::numerics::BatchNorm::new(0).eps
}
fn default_bn_momentum() -> f64 {
    crate::numerics::BatchNorm::new(0).momentum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub d_in: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub n1: usize,
    pub n2: usize,
    pub k: usize,
    pub heads: usize,
    #[serde(default)]
    pub distance: Distance,
    /// Std of the normal value initialization; `None` means `1/√d_v`.
    #[serde(default)]
    pub value_init_scale: Option<f64>,
    #[serde(default = "default_true")]
    pub bn_affine: bool,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl MemoryConfig {
    /// Dot-product config with batchnorm defaults.
    pub fn new(d_in: usize, d_q: usize, d_v: usize, n1: usize, n2: usize, k: usize, heads: usize) -> Self {
        Self {
            d_in,
            d_q,
            d_v,
            n1,
            n2,
            k,
            heads,
            distance: Distance::Dot,
            value_init_scale: None,
            bn_affine: true,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PkmError::Config(m));
        if self.d_in == 0 || self.d_v == 0 {
            return fail("d_in and d_v must be positive".into());
        }
        if self.heads == 0 {
            return fail("heads must be >= 1".into());
        }
        if self.d_q == 0 || self.d_q % (2 * self.heads) != 0 {
            return fail(format!(
                "d_q = {} must be a positive multiple of 2·heads = {}",
                self.d_q,
                2 * self.heads
            ));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return fail("half-key counts must be positive".into());
        }
        if self.k == 0 || self.k > self.n1 || self.k > self.n2 {
            return fail(format!(
                "k = {} must satisfy 1 <= k <= min(n1, n2) = {}",
                self.k,
                self.n1.min(self.n2)
            ));
        }
        if let Distance::Cosine { alpha } = self.distance {
            if !(0.0..=1.0).contains(&alpha) {
                return fail(format!("cosine alpha must lie in [0,1], got {alpha}"));
            }
        }
        if let Some(s) = self.value_init_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return fail(format!("value_init_scale must be finite and >= 0, got {s}"));
            }
        }
        Ok(())
    }

    /// Width of one half-query / half-key.
    pub fn half_dim(&self) -> usize {
        self.d_q / (2 * self.heads)
    }

    pub fn head_dim(&self) -> usize {
        self.d_q / self.heads
    }

    pub fn slots(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn half_len(&self, half: usize) -> usize {
        if half == 0 {
            self.n1
        } else {
            self.n2
        }
    }

    pub fn value_scale(&self) -> f64 {
        self.value_init_scale
            .unwrap_or_else(|| 1.0 / (self.d_v as f64).sqrt())
    }

    pub fn flat_index(&self, i1: usize, i2: usize) -> usize {
        i1 * self.n2 + i2
    }

    pub fn split_index(&self, flat: usize) -> (usize, usize) {
        (flat / self.n2, flat % self.n2)
    }

    /// Key-score evaluations per sample for one forward pass:
    /// `heads · (n1 + n2 + k²)`.
    pub fn score_evals_per_sample(&self) -> u64 {
        (self.heads * (self.n1 + self.n2 + self.k * self.k)) as u64
    }
}

/// The two half-key tables of one head; `halves[0]` is K₁ (n1 rows),
/// `halves[1]` is K₂ (n2 rows).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadKeys {
    pub halves: [DenseMatrix; 2],
}

impl HeadKeys {
    pub fn k1(&self) -> &DenseMatrix {
        &self.halves[0]
    }

    pub fn k2(&self) -> &DenseMatrix {
        &self.halves[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductKeyStore {
    pub heads: Vec<HeadKeys>,
}

impl ProductKeyStore {
    /// Keys uniform on `[-1/√half_dim, 1/√half_dim]` per coordinate.
    pub fn init(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        let dh = cfg.half_dim();
        let bound = 1.0 / (dh as f64).sqrt();
        let mut table = |n: usize| {
            let data = (0..n * dh).map(|_| rng.uniform_range(-bound, bound)).collect();
            DenseMatrix::from_vec(n, dh, data).expect("sized")
        };
        let heads = (0..cfg.heads)
            .map(|_| {
                let k1 = table(cfg.n1);
                let k2 = table(cfg.n2);
                HeadKeys { halves: [k1, k2] }
            })
            .collect();
        Self { heads }
    }

    pub fn is_finite(&self) -> bool {
        self.heads
            .iter()
            .all(|h| h.halves.iter().all(DenseMatrix::is_finite))
    }
}

/// `n1·n2` value slots of width `d_v`, shared by all heads. Slot `(i₁, i₂)`
/// lives at row `i₁·n2 + i₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub slots: DenseMatrix,
}

impl ValueTable {
    pub fn init(cfg: &MemoryConfig, rng: &mut Rng) -> Self {
        let scale = cfg.value_scale();
        let data = (0..cfg.slots() * cfg.d_v).map(|_| rng.normal(0.0, scale)).collect();
        Self {
            slots: DenseMatrix::from_vec(cfg.slots(), cfg.d_v, data).expect("sized"),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.rows() == 0
    }

    pub fn row(&self, flat: usize) -> &[f64] {
        self.slots.row(flat)
    }
}
