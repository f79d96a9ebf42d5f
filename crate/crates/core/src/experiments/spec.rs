use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{PkmError, Result};
use crate::memory::MemoryConfig;
use crate::optim::OptimizerConfig;
use crate::reinit::ReinitConfig;

fn default_embed() -> usize {
    512
}
fn default_hidden() -> usize {
    15_000
}
fn default_multiplier() -> f64 {
    10.0
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    200
}
fn default_early_stop() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `embed (d → embed_dim) → memory → head (d_v → m)`.
    Memory {
        #[serde(default = "default_embed")]
        embed_dim: usize,
        memory: MemoryConfig,
    },
    /// `embed (d → embed_dim) → W₁ (→ hidden) → ReLU → W₂ (→ embed_dim) → head`.
    WideMlp {
        #[serde(default = "default_embed")]
        embed_dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Memory { embed_dim, memory } => {
                memory.validate()?;
                if memory.d_in != *embed_dim {
                    return Err(PkmError::Config(format!(
                        "memory.d_in = {} must equal embed_dim = {embed_dim}",
                        memory.d_in
                    )));
                }
                Ok(())
            }
            ModelSpec::WideMlp { embed_dim, hidden } => {
                if *embed_dim == 0 || *hidden == 0 {
                    return Err(PkmError::Config("wide MLP widths must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn memory(&self) -> Option<&MemoryConfig> {
        match self {
            ModelSpec::Memory { memory, .. } => Some(memory),
            ModelSpec::WideMlp { .. } => None,
        }
    }
}

/// Complete description of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Learning-rate factor for the sparse value table.
    #[serde(default = "default_multiplier")]
    pub sparse_lr_multiplier: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop once eval top-1 reaches this value.
    #[serde(default = "default_early_stop")]
    pub early_stop_top1: Option<f64>,
    /// Re-initialization schedule; absent means off.
    #[serde(default)]
    pub reinit: Option<ReinitConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Adds wall-clock `ms_per_step` to metrics records. Off by default so
    /// metrics files are reproducible byte for byte.
    #[serde(default)]
    pub log_timing: bool,
    /// Emit a step record every this many steps (0 = off).
    #[serde(default)]
    pub step_log_interval: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Desk-scale memory run: N = |M| = 4096, d = 8, m = 10, k = 10, with
    /// d_q equal to the embedding width and d_v = 64.
    pub fn desk_memory(heads: usize, reinit: bool, seed: u64) -> Self {
        let memory = MemoryConfig::new(512, 512, 64, 64, 64, 10, heads);
        Self {
            dataset: DatasetSpec {
                n: 4096,
                d: 8,
                m: 10,
                seed: None,
                holdout: 0,
            },
            model: ModelSpec::Memory { embed_dim: 512, memory },
            optimizer: OptimizerConfig::default(),
            sparse_lr_multiplier: default_multiplier(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            early_stop_top1: default_early_stop(),
            reinit: reinit.then(ReinitConfig::default),
            seed,
            log_timing: false,
            step_log_interval: 0,
            out_dir: None,
        }
    }

    /// Desk-scale wide-MLP baseline on the same data.
    pub fn desk_wide_mlp(hidden: usize, seed: u64) -> Self {
        Self {
            model: ModelSpec::WideMlp { embed_dim: 512, hidden },
            ..Self::desk_memory(1, false, seed)
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PkmError::Config(m));
        if self.dataset.n == 0 || self.dataset.d == 0 || self.dataset.m == 0 {
            return bad("dataset n, d, m must be >= 1".into());
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        if !(self.sparse_lr_multiplier > 0.0) {
            return bad("sparse_lr_multiplier must be > 0".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (batchnorm needs batch statistics)".into());
        }
        if let Some(r) = &self.reinit {
            r.validate()?;
            if self.model.memory().is_none() {
                return bad("reinit needs a memory model".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}
