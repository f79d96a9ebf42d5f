//! Memory-health diagnostics: access mass and its KL divergence to uniform,
//! plus deterministic operation counters.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{PkmError, Result};
use crate::memory::MemoryOutput;

/// Instrumented operation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Half-key scores plus combined-candidate scores.
    pub score_evals: u64,
    /// Value rows read during aggregation.
    pub value_reads: u64,
    /// Parameter rows written by sparse optimizer steps.
    pub sparse_writes: u64,
    /// Cosine scores whose norm hit the clamp.
    pub norm_clamps: u64,
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        self.score_evals += o.score_evals;
        self.value_reads += o.value_reads;
        self.sparse_writes += o.sparse_writes;
        self.norm_clamps += o.norm_clamps;
    }
}

/// Accumulated softmax weight per flat value slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AccessMass {
    mass: Vec<f64>,
    total: f64,
}

impl AccessMass {
    pub fn new(slots: usize) -> Self {
        Self {
            mass: vec![0.0; slots],
            total: 0.0,
        }
    }

    pub fn from_mass(mass: Vec<f64>) -> Result<Self> {
        if mass.iter().any(|m| !(*m >= 0.0)) {
            return Err(PkmError::Config("access mass must be non-negative".into()));
        }
        let total = mass.iter().sum();
        Ok(Self { mass, total })
    }

    pub fn observe(&mut self, out: &MemoryOutput) {
        for sel in &out.selections {
            for (&i, &w) in sel.indices.iter().zip(&sel.weights) {
                self.mass[i] += w;
                self.total += w;
            }
        }
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Fraction of slots with non-zero mass.
    pub fn used_fraction(&self) -> f64 {
        if self.mass.is_empty() {
            return 0.0;
        }
        self.mass.iter().filter(|m| **m > 0.0).count() as f64 / self.mass.len() as f64
    }
}

/// `KL(p ‖ uniform) = Σ p_i ln(p_i·|K|)` in nats, with `0·ln 0 = 0`.
pub fn kl_to_uniform(mass: &AccessMass) -> Result<f64> {
    if !(mass.total > 0.0) {
        return Err(PkmError::State("KL to uniform needs positive total mass".into()));
    }
    let n = mass.mass.len() as f64;
    let kl = mass
        .mass
        .iter()
        .filter(|m| **m > 0.0)
        .map(|m| {
            let p = m / mass.total;
            p * (p * n).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// `#{c_i ≠ 0} / |c|`.
pub fn nonzero_fraction(counts: &[u64]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|c| **c != 0).count() as f64 / counts.len() as f64
}
