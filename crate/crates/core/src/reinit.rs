//! Utilization tracking and re-initialization of dying keys.
//!
//! Every selection of flat slot `(i₁, i₂)` increments counter `i₁` of the
//! first half and `i₂` of the second half of the selecting head. Once the
//! utilization reading plateaus, [`reinitialize`] replaces half-key slots
//! whose count is below the threshold `d_k` with noisy copies of surviving
//! slots, re-draws every value row addressed through a replaced slot, and
//! zeroes the matching optimizer state. Replacement happens in place: table
//! sizes and flat addressing never change.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{PkmError, Result};
use crate::memory::{MemoryLayer, MemoryOutput};
use crate::metrics::nonzero_fraction;
use crate::numerics::Rng;
use crate::optim::MemoryOptimizers;

/// Utilization threshold `d_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Threshold {
    /// Absolute selection count.
    Count(u64),
    /// `d_k = max(1, ceil(fraction · selections recorded for the half))`.
    Fraction(f64),
}

impl Threshold {
    pub fn resolve(&self, selections: u64) -> u64 {
        match *self {
            Threshold::Count(c) => c,
            Threshold::Fraction(f) => ((f * selections as f64).ceil() as u64).max(1),
        }
    }
}

/// What happens to value rows addressed through a replaced key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueReinit {
    /// Redraw from the value initialization distribution.
    #[default]
    ResampleUniform,
    Zero,
}

fn default_threshold() -> Threshold {
    Threshold::Fraction(1e-6)
}
fn default_sigma() -> f64 {
    0.1
}
fn default_delta() -> f64 {
    0.01
}
fn default_window() -> usize {
    5
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReinitConfig {
    #[serde(default = "default_threshold")]
    pub threshold: Threshold,
    /// Std of the Gaussian perturbation added to copied keys.
    #[serde(default = "default_sigma")]
    pub sigma_n: f64,
    /// Minimum steps between re-initializations; `None` means one epoch.
    #[serde(default)]
    pub trigger_period: Option<u64>,
    #[serde(default = "default_delta")]
    pub plateau_delta: f64,
    /// Number of utilization readings compared for the plateau test.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub value_reinit: ValueReinit,
    /// Cap on replacements per half per call, least utilized first.
    #[serde(default)]
    pub max_replacements: Option<usize>,
    /// Zero every counter after a re-initialization (otherwise only the
    /// replaced slots are zeroed).
    #[serde(default = "default_true")]
    pub reset_counters: bool,
}

impl Default for ReinitConfig {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            sigma_n: default_sigma(),
            trigger_period: None,
            plateau_delta: default_delta(),
            window: default_window(),
            value_reinit: ValueReinit::default(),
            max_replacements: None,
            reset_counters: true,
        }
    }
}

impl ReinitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PkmError::Config(m));
        match self.threshold {
            Threshold::Count(0) => return bad("threshold count d_k must be >= 1".into()),
            Threshold::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return bad(format!("threshold fraction must lie in (0,1], got {f}"))
            }
            _ => {}
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return bad(format!("sigma_n must be finite and >= 0, got {}", self.sigma_n));
        }
        if self.trigger_period == Some(0) {
            return bad("trigger_period must be >= 1".into());
        }
        if !(self.plateau_delta >= 0.0) {
            return bad("plateau_delta must be >= 0".into());
        }
        if self.window == 0 {
            return bad("plateau window must hold at least one reading".into());
        }
        Ok(())
    }
}

/// Per-head, per-half selection counters plus the plateau window.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationState {
    n: [usize; 2],
    counters: Vec<[Vec<u64>; 2]>,
    window: VecDeque<f64>,
    window_len: usize,
    step_of_last_reinit: u64,
}

impl UtilizationState {
    pub fn new(heads: usize, n1: usize, n2: usize, window_len: usize) -> Self {
        Self {
            n: [n1, n2],
            counters: (0..heads).map(|_| [vec![0; n1], vec![0; n2]]).collect(),
            window: VecDeque::with_capacity(window_len),
            window_len: window_len.max(1),
            step_of_last_reinit: 0,
        }
    }

    pub fn for_layer(layer: &MemoryLayer, window_len: usize) -> Self {
        let c = &layer.config;
        Self::new(c.heads, c.n1, c.n2, window_len)
    }

    pub fn heads(&self) -> usize {
        self.counters.len()
    }

    pub fn counts(&self, head: usize, half: usize) -> &[u64] {
        &self.counters[head][half]
    }

    pub fn counts_mut(&mut self, head: usize, half: usize) -> &mut [u64] {
        &mut self.counters[head][half]
    }

    pub fn step_of_last_reinit(&self) -> u64 {
        self.step_of_last_reinit
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    /// Counts every selection in `out`.
    pub fn observe(&mut self, out: &MemoryOutput) -> Result<()> {
        if out.heads != self.heads() {
            return Err(PkmError::State(format!(
                "output has {} heads, state tracks {}",
                out.heads,
                self.heads()
            )));
        }
        let slots = self.n[0] * self.n[1];
        if let Some(bad) = out
            .selections
            .iter()
            .flat_map(|s| s.indices.iter())
            .find(|&&i| i >= slots)
        {
            return Err(PkmError::State(format!(
                "selected slot {bad} out of range for {slots} slots"
            )));
        }
        let n2 = self.n[1];
        for (j, sel) in out.selections.iter().enumerate() {
            let [c1, c2] = &mut self.counters[j % out.heads];
            for &i in &sel.indices {
                c1[i / n2] += 1;
                c2[i % n2] += 1;
            }
        }
        Ok(())
    }

    /// `#{c_i ≠ 0} / |half|` per head and half.
    pub fn utilization_fraction(&self) -> Vec<[f64; 2]> {
        self.counters
            .iter()
            .map(|[a, b]| [nonzero_fraction(a), nonzero_fraction(b)])
            .collect()
    }

    pub fn mean_utilization(&self) -> f64 {
        let f = self.utilization_fraction();
        if f.is_empty() {
            return 0.0;
        }
        f.iter().map(|[a, b]| a + b).sum::<f64>() / (2 * f.len()) as f64
    }

    /// Pushes a utilization reading, dropping the oldest beyond the window.
    pub fn record_reading(&mut self, reading: f64) {
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(reading);
    }

    pub fn reset_counters(&mut self) {
        for [a, b] in &mut self.counters {
            a.iter_mut().for_each(|c| *c = 0);
            b.iter_mut().for_each(|c| *c = 0);
        }
    }

    /// True once `trigger_period` steps have passed since the last
    /// re-initialization and the full window's relative spread
    /// `(max - min) / max` is below `plateau_delta`.
    pub fn plateau_reached(&self, cfg: &ReinitConfig, step: u64) -> bool {
        let period = cfg.trigger_period.unwrap_or(1);
        if step < self.step_of_last_reinit + period {
            return false;
        }
        if self.window.len() < self.window_len.min(cfg.window.max(1)) {
            return false;
        }
        let lo = self.window.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= 0.0 {
            return true;
        }
        (hi - lo) / hi < cfg.plateau_delta
    }
}

/// Outcome of one [`reinitialize`] call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReinitReport {
    pub step: u64,
    /// Replaced slot count per head and half.
    pub replaced_counts: Vec<[usize; 2]>,
    /// Heads/halves left untouched because no slot survived the threshold.
    pub all_dead: Vec<[bool; 2]>,
    pub value_slots_reset: usize,
    pub utilization_before: Vec<[f64; 2]>,
    pub utilization_after: Vec<[f64; 2]>,
    /// `(replaced slot, source slot)` per head and half.
    #[serde(skip)]
    pub replacements: Vec<[Vec<(usize, usize)>; 2]>,
    /// Flat value slots that were re-drawn, ascending.
    #[serde(skip)]
    pub value_slots: Vec<usize>,
}

impl ReinitReport {
    pub fn total_replaced(&self) -> usize {
        self.replaced_counts.iter().map(|[a, b]| a + b).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_replaced() == 0
    }
}

/// Replaces under-utilized half-key slots in place.
///
/// For each head and each half (first half first): slots with count below
/// `d_k` are dead; each dead slot (capped by `max_replacements`, least used
/// first) takes the key of a survivor drawn uniformly at random plus
/// `N(0, σ_n²)` noise per coordinate. Value rows in the cross-section of a
/// replaced slot are re-initialized, and optimizer state of replaced keys and
/// re-initialized value rows is zeroed. A half without survivors is left
/// untouched and flagged.
pub fn reinitialize(
    layer: &mut MemoryLayer,
    util: &mut UtilizationState,
    optim: &mut MemoryOptimizers,
    cfg: &ReinitConfig,
    rng: &mut Rng,
    step: u64,
) -> Result<ReinitReport> {
    cfg.validate()?;
    let c = layer.config.clone();
    if util.heads() != c.heads || util.n != [c.n1, c.n2] {
        return Err(PkmError::State("utilization state does not match the layer".into()));
    }
    if optim.keys.len() != c.heads || optim.values.rows() != c.slots() {
        return Err(PkmError::State("optimizer state does not match the layer".into()));
    }

    let mut report = ReinitReport {
        step,
        utilization_before: util.utilization_fraction(),
        ..Default::default()
    };
    let mut value_slots = BTreeSet::new();

    for h in 0..c.heads {
        let mut counts_h = [0usize; 2];
        let mut dead_h = [false; 2];
        let mut repl_h: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for j in 0..2 {
            let counts = &util.counters[h][j];
            let d_k = cfg.threshold.resolve(counts.iter().sum());
            let survivors: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] >= d_k).collect();
            let mut dead: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] < d_k).collect();
            if dead.is_empty() {
                continue;
            }
            if survivors.is_empty() {
                dead_h[j] = true;
                continue;
            }
            if let Some(cap) = cfg.max_replacements {
                dead.sort_by_key(|&i| (counts[i], i));
                dead.truncate(cap);
                dead.sort_unstable();
            }
            let table = &mut layer.keys.heads[h].halves[j];
            for &slot in &dead {
                let src = survivors[rng.below(survivors.len())];
                for d in 0..table.cols() {
                    let v = table.get(src, d) + rng.normal(0.0, cfg.sigma_n);
                    table.set(slot, d, v);
                }
                repl_h[j].push((slot, src));
                match j {
                    0 => value_slots.extend((0..c.n2).map(|t| c.flat_index(slot, t))),
                    _ => value_slots.extend((0..c.n1).map(|t| c.flat_index(t, slot))),
                }
            }
            optim.keys[h][j].reset_slots(&dead);
            let counts = &mut util.counters[h][j];
            for &slot in &dead {
                counts[slot] = 0;
            }
            counts_h[j] = dead.len();
        }
        report.replaced_counts.push(counts_h);
        report.all_dead.push(dead_h);
        report.replacements.push(repl_h);
    }

    let value_slots: Vec<usize> = value_slots.into_iter().collect();
    let scale = c.value_scale();
    for &slot in &value_slots {
        let row = layer.values.slots.row_mut(slot);
        match cfg.value_reinit {
            ValueReinit::ResampleUniform => row.iter_mut().for_each(|v| *v = rng.normal(0.0, scale)),
            ValueReinit::Zero => row.iter_mut().for_each(|v| *v = 0.0),
        }
    }
    optim.values.reset_slots(&value_slots);

    report.utilization_after = util.utilization_fraction();
    report.value_slots_reset = value_slots.len();
    report.value_slots = value_slots;
    if cfg.reset_counters {
        util.reset_counters();
    }
    util.step_of_last_reinit = step;
    util.window.clear();
    Ok(report)
}
