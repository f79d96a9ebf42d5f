use std::cmp::Ordering;

use super::Distance;
use crate::metrics::OpCounts;
use crate::numerics::DenseMatrix;

/// Norms below this are clamped in the cosine score.
pub const NORM_CLAMP: f64 = 1e-12;

/// `(index, score)`; the index is a half-key row or a flat value slot.
pub type ScoredIndex = (usize, f64);

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Returns the score and whether a norm had to be clamped.
#[inline]
pub(crate) fn score_checked(q: &[f64], key: &[f64], distance: Distance) -> (f64, bool) {
    debug_assert_eq!(q.len(), key.len());
    match distance {
        Distance::Dot => (dot(q, key), false),
        Distance::Cosine { alpha } => {
            let (qn, kn) = (dot(q, q).sqrt(), dot(key, key).sqrt());
            let clamped = qn < NORM_CLAMP || kn < NORM_CLAMP;
            let (qn, kn) = (qn.max(NORM_CLAMP), kn.max(NORM_CLAMP));
            (qn.powf(alpha) * kn.powf(alpha) * (dot(q, key) / (qn * kn)), clamped)
        }
    }
}

/// Similarity of a half-query and a half-key.
pub fn score(q: &[f64], key: &[f64], distance: Distance) -> f64 {
    score_checked(q, key, distance).0
}

/// Accumulates `upstream · ∂score/∂q` into `dq` and `upstream · ∂score/∂key`
/// into `dkey`.
///
/// For the cosine score `s = (‖q‖‖k‖)^(α-1) qᵀk`:
/// `∂s/∂q = (‖q‖‖k‖)^(α-1) (k + (α-1) qᵀk q / ‖q‖²)`, symmetrically for k.
/// A clamped norm is treated as constant.
pub fn score_grad(q: &[f64], key: &[f64], distance: Distance, upstream: f64, dq: &mut [f64], dkey: &mut [f64]) {
    match distance {
        Distance::Dot => {
            for i in 0..q.len() {
                dq[i] += upstream * key[i];
                dkey[i] += upstream * q[i];
            }
        }
        Distance::Cosine { alpha } => {
            let (qn_raw, kn_raw) = (dot(q, q).sqrt(), dot(key, key).sqrt());
            let (qn, kn) = (qn_raw.max(NORM_CLAMP), kn_raw.max(NORM_CLAMP));
            let p = dot(q, key);
            let c = (qn * kn).powf(alpha - 1.0);
            let q_term = if qn_raw < NORM_CLAMP {
                0.0
            } else {
                (alpha - 1.0) * p / (qn * qn)
            };
            let k_term = if kn_raw < NORM_CLAMP {
                0.0
            } else {
                (alpha - 1.0) * p / (kn * kn)
            };
            for i in 0..q.len() {
                dq[i] += upstream * c * (key[i] + q_term * q[i]);
                dkey[i] += upstream * c * (q[i] + k_term * key[i]);
            }
        }
    }
}

/// Higher score first; equal scores go to the lower index.
#[inline]
fn rank(a: &ScoredIndex, b: &ScoredIndex) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn take_top(mut cands: Vec<ScoredIndex>, k: usize) -> Vec<ScoredIndex> {
    let k = k.min(cands.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, rank);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank);
    cands
}

/// The `k` best half-keys for `q_half`, in descending score order.
pub fn half_topk(q_half: &[f64], keys: &DenseMatrix, k: usize, distance: Distance, ops: &mut OpCounts) -> Vec<ScoredIndex> {
    let mut clamps = 0;
    let cands: Vec<ScoredIndex> = (0..keys.rows())
        .map(|i| {
            let (s, c) = score_checked(q_half, keys.row(i), distance);
            clamps += c as u64;
            (i, s)
        })
        .collect();
    ops.score_evals += keys.rows() as u64;
    ops.norm_clamps += clamps;
    take_top(cands, k)
}

/// Top-k of the Cartesian product of two half top-k lists. Candidate
/// `(i₁, i₂)` scores `s₁ + s₂` and is addressed as `i₁·n2 + i₂`.
pub fn combine_topk(top1: &[ScoredIndex], top2: &[ScoredIndex], n2: usize, k: usize, ops: &mut OpCounts) -> Vec<ScoredIndex> {
    let mut cands = Vec::with_capacity(top1.len() * top2.len());
    for &(i1, s1) in top1 {
        for &(i2, s2) in top2 {
            cands.push((i1 * n2 + i2, s1 + s2));
        }
    }
    ops.score_evals += cands.len() as u64;
    take_top(cands, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng};

    #[test]
    fn score_examples() {
        let cos = |alpha| Distance::Cosine { alpha };
        assert_eq!(score(&[2.0, 0.0], &[3.0, 0.0], cos(1.0)), 6.0);
        assert_eq!(score(&[2.0, 0.0], &[3.0, 0.0], Distance::Dot), 6.0);
        assert_eq!(score(&[2.0, 0.0], &[3.0, 0.0], cos(0.0)), 1.0);
        for d in [Distance::Dot, cos(0.0), cos(0.4), cos(1.0)] {
            assert_eq!(score(&[1.0, 1.0], &[1.0, -1.0], d), 0.0);
        }
    }

    #[test]
    fn zero_norm_is_clamped_and_counted() {
        let keys = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let mut ops = OpCounts::default();
        let top = half_topk(&[1.0, 0.0], &keys, 2, Distance::Cosine { alpha: 0.5 }, &mut ops);
        assert!(top.iter().all(|(_, s)| s.is_finite()));
        assert_eq!(top[0].0, 1);
        assert_eq!(ops.norm_clamps, 1);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        for _ in 0..100 {
            let n = 1 + rng.below(6);
            let alpha = rng.uniform();
            let d = Distance::Cosine { alpha };
            let q: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            let k: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            let (mut dq, mut dk) = (vec![0.0; n], vec![0.0; n]);
            score_grad(&q, &k, d, 1.0, &mut dq, &mut dk);
            let r = grad_check(|p| score(p, &k, d), &q, &dq).unwrap();
            assert!(r.max_rel_error < 1e-6, "dq {}", r.max_rel_error);
            let r = grad_check(|p| score(&q, p, d), &k, &dk).unwrap();
            assert!(r.max_rel_error < 1e-6, "dk {}", r.max_rel_error);
        }
    }

    #[test]
    fn half_topk_examples() {
        let keys = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let mut ops = OpCounts::default();
        assert_eq!(half_topk(&[1.0, 0.0], &keys, 2, Distance::Dot, &mut ops), vec![(0, 1.0), (1, 0.0)]);
        assert_eq!(
            half_topk(&[1.0, 0.0], &keys, 3, Distance::Dot, &mut ops),
            vec![(0, 1.0), (1, 0.0), (2, -1.0)]
        );
        assert_eq!(ops.score_evals, 6);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let keys = DenseMatrix::from_rows(&[vec![0.0], vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let top = half_topk(&[1.0], &keys, 2, Distance::Dot, &mut OpCounts::default());
        assert_eq!(top, vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn half_topk_matches_full_sort() {
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let (n, dh) = (1 + rng.below(40), 1 + rng.below(5));
            let k = 1 + rng.below(n);
            // small integers produce plenty of ties
            let keys = DenseMatrix::from_vec(n, dh, (0..n * dh).map(|_| rng.below(5) as f64 - 2.0).collect()).unwrap();
            let q: Vec<f64> = (0..dh).map(|_| rng.below(5) as f64 - 2.0).collect();
            let mut full: Vec<ScoredIndex> = (0..n)
                .map(|i| (i, keys.row(i).iter().zip(&q).map(|(a, b)| a * b).sum()))
                .collect();
            full.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            full.truncate(k);
            assert_eq!(half_topk(&q, &keys, k, Distance::Dot, &mut OpCounts::default()), full);
        }
    }

    #[test]
    fn combine_examples() {
        // a=0, b=1 on half 1; c=0, d=1 on half 2; n2 = 2
        let top1 = [(0, 3.0), (1, 2.0)];
        let top2 = [(0, 5.0), (1, 1.0)];
        let mut ops = OpCounts::default();
        assert_eq!(combine_topk(&top1, &top2, 2, 2, &mut ops), vec![(0, 8.0), (2, 7.0)]);
        assert_eq!(ops.score_evals, 4);
        assert_eq!(combine_topk(&top1[..1], &top2[..1], 2, 1, &mut ops), vec![(0, 8.0)]);
        assert_eq!(combine_topk(&top1, &top2, 2, 4, &mut ops), vec![(0, 8.0), (2, 7.0), (1, 4.0), (3, 3.0)]);
    }
}
