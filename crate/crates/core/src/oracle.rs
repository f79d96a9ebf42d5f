//! Brute-force references for the memory layer.
//!
//! Nothing here calls into the selection, scoring or aggregation code of
//! [`crate::memory`]; the layer is only read for its parameters. Any
//! disagreement between the two paths is a bug in one of them.

use serde::{Deserialize, Serialize};

use crate::memory::{Distance, MemoryConfig, MemoryLayer};
use crate::numerics::{DenseMatrix, Mode, Rng};

fn oracle_score(q: &[f64], k: &[f64], distance: Distance) -> f64 {
    let mut qk = 0.0;
    let mut qq = 0.0;
    let mut kk = 0.0;
    for i in 0..q.len() {
        qk += q[i] * k[i];
    }
    match distance {
        Distance::Dot => qk,
        Distance::Cosine { alpha } => {
            for i in 0..q.len() {
                qq += q[i] * q[i];
            }
            for i in 0..k.len() {
                kk += k[i] * k[i];
            }
            let qn = qq.sqrt().max(1e-12);
            let kn = kk.sqrt().max(1e-12);
            qn.powf(alpha) * kn.powf(alpha) * (qk / (qn * kn))
        }
    }
}

/// Combined scores of every `(i₁, i₂)` pair for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGridScores {
    pub n1: usize,
    pub n2: usize,
    /// Row-major `n1 × n2`.
    pub scores: Vec<f64>,
}

impl FullGridScores {
    pub fn compute(q1: &[f64], q2: &[f64], k1: &DenseMatrix, k2: &DenseMatrix, distance: Distance) -> Self {
        let (n1, n2) = (k1.rows(), k2.rows());
        let mut scores = Vec::with_capacity(n1 * n2);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                scores.push(oracle_score(q1, k1.row(i1), distance) + oracle_score(q2, k2.row(i2), distance));
            }
        }
        Self { n1, n2, scores }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveTopk {
    /// `(flat index, combined score)`, best first.
    pub entries: Vec<(usize, f64)>,
    /// Number of full-key scores computed (`n1·n2`).
    pub scores_evaluated: u64,
}

/// Exhaustive top-k over the full product grid with a full sort.
pub fn naive_topk(q1: &[f64], q2: &[f64], k1: &DenseMatrix, k2: &DenseMatrix, k: usize, distance: Distance) -> NaiveTopk {
    let grid = FullGridScores::compute(q1, q2, k1, k2, distance);
    let mut all: Vec<(usize, f64)> = grid.scores.iter().copied().enumerate().collect();
    all.sort_by(|a, b| {
        if a.1 > b.1 {
            std::cmp::Ordering::Less
        } else if a.1 < b.1 {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    all.truncate(k);
    NaiveTopk {
        entries: all,
        scores_evaluated: grid.scores.len() as u64,
    }
}

/// Queries computed with plain loops: projection, then batchnorm with batch
/// statistics (train) or running statistics (eval).
pub fn naive_queries(layer: &MemoryLayer, x: &DenseMatrix, mode: Mode) -> DenseMatrix {
    let w = &layer.query.projection.weight;
    let b = &layer.query.projection.bias;
    let bn = &layer.query.bn;
    let (n, dq) = (x.rows(), w.rows());
    let mut proj = DenseMatrix::zeros(n, dq);
    for r in 0..n {
        for j in 0..dq {
            let mut s = b[j];
            for i in 0..w.cols() {
                s += w.get(j, i) * x.get(r, i);
            }
            proj.set(r, j, s);
        }
    }
    let mut out = DenseMatrix::zeros(n, dq);
    for j in 0..dq {
        let (mean, var) = match mode {
            Mode::Eval => (bn.running_mean[j], bn.running_var[j]),
            Mode::Train => {
                let mean = (0..n).map(|r| proj.get(r, j)).sum::<f64>() / n as f64;
                let var = (0..n).map(|r| (proj.get(r, j) - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var)
            }
        };
        for r in 0..n {
            let xhat = (proj.get(r, j) - mean) / (var + bn.eps).sqrt();
            out.set(r, j, bn.gamma[j] * xhat + bn.beta[j]);
        }
    }
    out
}

/// Memory read by exhaustive scoring of all `n1·n2` keys per head.
pub fn naive_read(layer: &MemoryLayer, queries: &DenseMatrix) -> DenseMatrix {
    let c = &layer.config;
    let (dh, hd) = (c.half_dim(), c.head_dim());
    let mut out = DenseMatrix::zeros(queries.rows(), c.d_v);
    for r in 0..queries.rows() {
        let q = queries.row(r);
        for (h, keys) in layer.keys.heads.iter().enumerate() {
            let q1 = &q[h * hd..h * hd + dh];
            let q2 = &q[h * hd + dh..(h + 1) * hd];
            let top = naive_topk(q1, q2, &keys.halves[0], &keys.halves[1], c.k, c.distance);
            let max = top.entries[0].1;
            let exps: Vec<f64> = top.entries.iter().map(|e| (e.1 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (e, x) in top.entries.iter().zip(&exps) {
                let w = x / z;
                for j in 0..c.d_v {
                    let cur = out.get(r, j);
                    out.set(r, j, cur + w * layer.values.slots.get(e.0, j));
                }
            }
        }
    }
    out
}

/// `m(x)` computed end to end by the oracle path.
pub fn naive_forward(layer: &MemoryLayer, x: &DenseMatrix, mode: Mode) -> DenseMatrix {
    naive_read(layer, &naive_queries(layer, x, mode))
}

/// A random configuration from the cross-check sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialConfig {
    pub seed: u64,
    pub config: MemoryConfig,
    /// Small-integer keys and queries (dot distance only) to force ties.
    pub integer_grid: bool,
}

/// Sweep: n1, n2 ∈ [4, 64], k ∈ [1, min(16, n1, n2)], h ∈ {1, 2, 4}, dot or
/// cosine with α ∈ [0, 1].
pub fn random_trial(seed: u64) -> TrialConfig {
    let mut rng = Rng::with_stream(seed, 0x0AC1E);
    let heads = [1, 2, 4][rng.below(3)];
    let n1 = 4 + rng.below(61);
    let n2 = 4 + rng.below(61);
    let k = 1 + rng.below(16.min(n1).min(n2));
    let half_dim = 1 + rng.below(4);
    let cosine = rng.below(2) == 1;
    let distance = if cosine {
        Distance::Cosine { alpha: rng.uniform() }
    } else {
        Distance::Dot
    };
    let integer_grid = !cosine && rng.below(4) == 0;
    let mut config = MemoryConfig::new(3 + rng.below(4), 2 * heads * half_dim, 1 + rng.below(4), n1, n2, k, heads);
    config.distance = distance;
    TrialConfig {
        seed,
        config,
        integer_grid,
    }
}

/// Details of a disagreement, written out as a reproduction case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Divergence {
    pub trial: TrialConfig,
    pub what: String,
    pub sample: usize,
    pub head: usize,
    pub query: Vec<f64>,
    pub k1: Vec<Vec<f64>>,
    pub k2: Vec<Vec<f64>>,
    pub two_stage: Vec<(usize, f64)>,
    pub brute_force: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrialOutcome {
    pub selections_checked: usize,
    pub max_forward_diff: f64,
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Runs one trial: checks selection order against the full grid on random
/// queries, then compares the layer's train and eval forward passes with
/// [`naive_forward`]. Forward differences above `forward_tol` are reported
/// as a divergence.
pub fn run_trial(trial: &TrialConfig, batch: usize, forward_tol: f64) -> Result<TrialOutcome, Box<Divergence>> {
    let c = &trial.config;
    let mut rng = Rng::with_stream(trial.seed, 1);
    let mut layer = MemoryLayer::new(c.clone(), &mut rng).expect("trial configs are valid");
    if trial.integer_grid {
        for h in &mut layer.keys.heads {
            for t in &mut h.halves {
                t.as_mut_slice().iter_mut().for_each(|v| *v = rng.below(5) as f64 - 2.0);
            }
        }
    }
    let (dh, hd) = (c.half_dim(), c.head_dim());
    let mut outcome = TrialOutcome::default();

    let mut queries = DenseMatrix::zeros(batch, c.d_q);
    for v in queries.as_mut_slice() {
        *v = if trial.integer_grid {
            rng.below(5) as f64 - 2.0
        } else {
            rng.normal(0.0, 1.0)
        };
    }
    let out = layer.read(&queries).expect("shapes match");
    for b in 0..batch {
        let q = queries.row(b);
        for (h, keys) in layer.keys.heads.iter().enumerate() {
            let q1 = &q[h * hd..h * hd + dh];
            let q2 = &q[h * hd + dh..(h + 1) * hd];
            let brute = naive_topk(q1, q2, &keys.halves[0], &keys.halves[1], c.k, c.distance);
            let sel = out.selection(b, h);
            let two: Vec<(usize, f64)> = sel.indices.iter().copied().zip(sel.scores.iter().copied()).collect();
            let same_order = two.len() == brute.entries.len()
                && two.iter().zip(&brute.entries).all(|(a, e)| a.0 == e.0);
            if !same_order {
                return Err(Box::new(Divergence {
                    trial: trial.clone(),
                    what: "selection".into(),
                    sample: b,
                    head: h,
                    query: q.to_vec(),
                    k1: rows_of(&keys.halves[0]),
                    k2: rows_of(&keys.halves[1]),
                    two_stage: two,
                    brute_force: brute.entries,
                }));
            }
            outcome.selections_checked += 1;
        }
    }

    let mut x = DenseMatrix::zeros(batch.max(2), c.d_in);
    x.as_mut_slice().iter_mut().for_each(|v| *v = rng.normal(0.0, 1.0));
    for mode in [Mode::Eval, Mode::Train] {
        let expect = naive_forward(&layer, &x, mode);
        let got = match mode {
            Mode::Eval => layer.forward_eval(&x),
            Mode::Train => layer.clone().forward(&x, Mode::Train),
        }
        .expect("shapes match");
        let diff = got
            .output
            .as_slice()
            .iter()
            .zip(expect.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        outcome.max_forward_diff = outcome.max_forward_diff.max(diff);
        if !(diff <= forward_tol) {
            return Err(Box::new(Divergence {
                trial: trial.clone(),
                what: format!("{mode:?} forward differs by {diff:e}"),
                sample: 0,
                head: 0,
                query: Vec::new(),
                k1: Vec::new(),
                k2: Vec::new(),
                two_stage: Vec::new(),
                brute_force: Vec::new(),
            }));
        }
    }
    Ok(outcome)
}
