//! Dense and sparse optimizers.
//!
//! Both Adam and SGD keep their state per parameter row ("slot"). Dense steps
//! touch every row; sparse steps touch only the rows listed in the gradient
//! and leave every other row's parameters and state bit-identical. Sparse
//! Adam advances a slot's step counter only when that slot is touched, so
//! bias correction is per slot. Weight decay is never applied on the sparse
//! path.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, PkmError, Result};

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Sgd {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    /// Adam, lr 1e-3, β₁ 0.9, β₂ 0.98.
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PkmError::Config(m));
        match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("adam lr must be positive, got {lr}"));
                }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                    return bad(format!("adam betas must lie in [0,1), got {beta1}, {beta2}"));
                }
                if !(eps > 0.0) || !(weight_decay >= 0.0) {
                    return bad("adam eps must be > 0 and weight_decay >= 0".into());
                }
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("sgd lr must be positive, got {lr}"));
                }
                if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
                    return bad("sgd momentum must lie in [0,1) and weight_decay >= 0".into());
                }
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    /// Optimizer state for a `rows × width` parameter table.
    pub fn build(&self, rows: usize, width: usize, lr_multiplier: f64) -> Optimizer {
        match *self {
            OptimizerConfig::Adam { .. } => Optimizer::Adam(AdamState::new(*self, rows, width, lr_multiplier)),
            OptimizerConfig::Sgd { .. } => Optimizer::Sgd(SgdState::new(*self, rows, width, lr_multiplier)),
        }
    }
}

/// Rows and floats written by one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepStats {
    pub rows_written: u64,
    pub values_written: u64,
}

fn check_pairs(rows: usize, width: usize, grads: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut prev: Option<usize> = None;
    for (i, g) in grads {
        if *i >= rows {
            return dim_err(format!("sparse index {i} out of range for {rows} slots"));
        }
        if g.len() != width {
            return dim_err(format!("sparse row width {} != {width}", g.len()));
        }
        if let Some(p) = prev {
            if *i == p {
                return Err(PkmError::State(format!(
                    "duplicate sparse index {i}; merge gradients before the step"
                )));
            }
            if *i < p {
                // unsorted input: fall back to a full duplicate scan
                let mut idx: Vec<usize> = grads.iter().map(|p| p.0).collect();
                idx.sort_unstable();
                if let Some(w) = idx.windows(2).find(|w| w[0] == w[1]) {
                    return Err(PkmError::State(format!(
                        "duplicate sparse index {}; merge gradients before the step",
                        w[0]
                    )));
                }
                return Ok(());
            }
        }
        prev = Some(*i);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_multiplier: f64,
    pub(crate) width: usize,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) steps: Vec<u64>,
}

impl AdamState {
    pub fn new(cfg: OptimizerConfig, rows: usize, width: usize, lr_multiplier: f64) -> Self {
        let (lr, beta1, beta2, eps, weight_decay) = match cfg {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => (lr, beta1, beta2, eps, weight_decay),
            OptimizerConfig::Sgd { lr, .. } => (lr, default_beta1(), default_beta2(), default_adam_eps(), 0.0),
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            lr_multiplier,
            width,
            m: vec![0.0; rows * width],
            v: vec![0.0; rows * width],
            steps: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.steps.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn first_moment(&self, row: usize) -> &[f64] {
        &self.m[row * self.width..(row + 1) * self.width]
    }

    pub fn second_moment(&self, row: usize) -> &[f64] {
        &self.v[row * self.width..(row + 1) * self.width]
    }

    pub fn step_count(&self, row: usize) -> u64 {
        self.steps[row]
    }

    fn update_row(&mut self, row: usize, params: &mut [f64], grad: &[f64], decay: bool) {
        self.steps[row] += 1;
        let t = self.steps[row] as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * self.lr_multiplier;
        let off = row * self.width;
        for j in 0..self.width {
            let mut g = grad[j];
            if decay && self.weight_decay != 0.0 {
                g += self.weight_decay * params[j];
            }
            let m = &mut self.m[off + j];
            let v = &mut self.v[off + j];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            params[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn dense_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepStats> {
        let n = self.rows() * self.width;
        if params.len() != n || grads.len() != n {
            return dim_err(format!(
                "adam dense step: state {n}, params {}, grads {}",
                params.len(),
                grads.len()
            ));
        }
        let w = self.width;
        for r in 0..self.rows() {
            self.update_row(r, &mut params[r * w..(r + 1) * w], &grads[r * w..(r + 1) * w], true);
        }
        Ok(StepStats {
            rows_written: self.rows() as u64,
            values_written: n as u64,
        })
    }

    pub fn sparse_step(&mut self, params: &mut [f64], grads: &[(usize, Vec<f64>)]) -> Result<StepStats> {
        if params.len() != self.rows() * self.width {
            return dim_err("adam sparse step: parameter table shape");
        }
        check_pairs(self.rows(), self.width, grads)?;
        let w = self.width;
        for (i, g) in grads {
            self.update_row(*i, &mut params[i * w..(i + 1) * w], g, false);
        }
        Ok(StepStats {
            rows_written: grads.len() as u64,
            values_written: (grads.len() * w) as u64,
        })
    }

    pub fn reset_slots(&mut self, rows: &[usize]) {
        let w = self.width;
        for &r in rows {
            self.m[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = 0.0);
            self.v[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = 0.0);
            self.steps[r] = 0;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_multiplier: f64,
    pub(crate) width: usize,
    pub(crate) velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(cfg: OptimizerConfig, rows: usize, width: usize, lr_multiplier: f64) -> Self {
        let (lr, momentum, weight_decay) = match cfg {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => (lr, momentum, weight_decay),
            OptimizerConfig::Adam { lr, .. } => (lr, 0.0, 0.0),
        };
        Self {
            lr,
            momentum,
            weight_decay,
            lr_multiplier,
            width,
            velocity: vec![0.0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.velocity.len() / self.width
        }
    }

    pub fn velocity(&self, row: usize) -> &[f64] {
        &self.velocity[row * self.width..(row + 1) * self.width]
    }

    fn update_row(&mut self, row: usize, params: &mut [f64], grad: &[f64], decay: bool) {
        let lr = self.lr * self.lr_multiplier;
        let off = row * self.width;
        for j in 0..self.width {
            let mut g = grad[j];
            if decay && self.weight_decay != 0.0 {
                g += self.weight_decay * params[j];
            }
            let v = &mut self.velocity[off + j];
            *v = self.momentum * *v + g;
            params[j] -= lr * *v;
        }
    }

    pub fn dense_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepStats> {
        let n = self.velocity.len();
        if params.len() != n || grads.len() != n {
            return dim_err("sgd dense step: shape mismatch");
        }
        let w = self.width;
        for r in 0..self.rows() {
            self.update_row(r, &mut params[r * w..(r + 1) * w], &grads[r * w..(r + 1) * w], true);
        }
        Ok(StepStats {
            rows_written: self.rows() as u64,
            values_written: n as u64,
        })
    }

    pub fn sparse_step(&mut self, params: &mut [f64], grads: &[(usize, Vec<f64>)]) -> Result<StepStats> {
        if params.len() != self.velocity.len() {
            return dim_err("sgd sparse step: parameter table shape");
        }
        check_pairs(self.rows(), self.width, grads)?;
        let w = self.width;
        for (i, g) in grads {
            self.update_row(*i, &mut params[i * w..(i + 1) * w], g, false);
        }
        Ok(StepStats {
            rows_written: grads.len() as u64,
            values_written: (grads.len() * w) as u64,
        })
    }

    pub fn reset_slots(&mut self, rows: &[usize]) {
        let w = self.width;
        for &r in rows {
            self.velocity[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(SgdState),
}

impl Optimizer {
    pub fn dense_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepStats> {
        match self {
            Optimizer::Adam(s) => s.dense_step(params, grads),
            Optimizer::Sgd(s) => s.dense_step(params, grads),
        }
    }

    pub fn sparse_step(&mut self, params: &mut [f64], grads: &[(usize, Vec<f64>)]) -> Result<StepStats> {
        match self {
            Optimizer::Adam(s) => s.sparse_step(params, grads),
            Optimizer::Sgd(s) => s.sparse_step(params, grads),
        }
    }

    pub fn reset_slots(&mut self, rows: &[usize]) {
        match self {
            Optimizer::Adam(s) => s.reset_slots(rows),
            Optimizer::Sgd(s) => s.reset_slots(rows),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Optimizer::Adam(s) => s.rows(),
            Optimizer::Sgd(s) => s.rows(),
        }
    }

    /// True if every per-slot moment, velocity and step count of `row` is zero.
    pub fn slot_is_fresh(&self, row: usize) -> bool {
        match self {
            Optimizer::Adam(s) => {
                s.steps[row] == 0
                    && s.first_moment(row).iter().all(|v| *v == 0.0)
                    && s.second_moment(row).iter().all(|v| *v == 0.0)
            }
            Optimizer::Sgd(s) => s.velocity(row).iter().all(|v| *v == 0.0),
        }
    }

    pub fn lr_multiplier(&self) -> f64 {
        match self {
            Optimizer::Adam(s) => s.lr_multiplier,
            Optimizer::Sgd(s) => s.lr_multiplier,
        }
    }
}


/// Optimizer state owned by a memory layer's key tables and value table.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryOptimizers {
    /// Per head, per half; dense steps over the half-key table.
    pub keys: Vec<[Optimizer; 2]>,
    /// Sparse steps over the value table.
    pub values: Optimizer,
}

impl MemoryOptimizers {
    /// Keys use the dense configuration; values get `sparse_lr_multiplier`.
    pub fn new(
        cfg: &crate::memory::MemoryConfig,
        optim: OptimizerConfig,
        sparse_lr_multiplier: f64,
    ) -> Self {
        let dh = cfg.half_dim();
        let keys = (0..cfg.heads)
            .map(|_| [optim.build(cfg.n1, dh, 1.0), optim.build(cfg.n2, dh, 1.0)])
            .collect();
        Self {
            keys,
            values: optim.build(cfg.slots(), cfg.d_v, sparse_lr_multiplier),
        }
    }
}
