use super::select::{combine_topk, half_topk, score_grad};
use super::{MemoryConfig, ProductKeyStore, ValueTable};
use crate::error::{dim_err, PkmError, Result};
use crate::metrics::OpCounts;
use crate::numerics::{
    softmax_in_place, BatchNorm, BatchNormCache, BatchNormGrads, DenseMatrix, Linear, LinearCache, LinearGrads, Mode,
    Rng, SparseRows,
};

/// Projection `d_in → d_q` followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryNetwork {
    pub projection: Linear,
    pub bn: BatchNorm,
}

/// Top-k result for one (sample, head).
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Flat value-slot indices, best first.
    pub indices: Vec<usize>,
    /// Combined scores matching `indices`.
    pub scores: Vec<f64>,
    /// Softmax of `scores`.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MemoryCache {
    pub projection: LinearCache,
    pub bn: BatchNormCache,
    pub queries: DenseMatrix,
}

#[derive(Clone, Debug)]
pub struct MemoryOutput {
    /// batch × d_v
    pub output: DenseMatrix,
    /// Indexed `sample · heads + head`.
    pub selections: Vec<Selection>,
    pub heads: usize,
    pub ops: OpCounts,
    /// Present only for train-mode passes.
    pub cache: Option<MemoryCache>,
}

impl MemoryOutput {
    pub fn selection(&self, sample: usize, head: usize) -> &Selection {
        &self.selections[sample * self.heads + head]
    }

    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }
}

#[derive(Clone, Debug)]
pub struct MemoryGrads {
    pub values: SparseRows,
    /// Per head, per half.
    pub keys: Vec<[SparseRows; 2]>,
    pub projection: LinearGrads,
    pub bn: BatchNormGrads,
    /// Gradient with respect to the layer input.
    pub input: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLayer {
    pub config: MemoryConfig,
    pub query: QueryNetwork,
    pub keys: ProductKeyStore,
    pub values: ValueTable,
}

impl MemoryLayer {
    pub fn new(config: MemoryConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let projection = Linear::new(config.d_in, config.d_q, rng);
        let bn = BatchNorm::with_params(config.d_q, config.bn_momentum, config.bn_eps, config.bn_affine)?;
        let keys = ProductKeyStore::init(&config, rng);
        let values = ValueTable::init(&config, rng);
        Ok(Self {
            config,
            query: QueryNetwork { projection, bn },
            keys,
            values,
        })
    }

    /// Checks that every table matches the config.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let p = &self.query.projection;
        if p.d_in() != c.d_in || p.d_out() != c.d_q || self.query.bn.dim() != c.d_q {
            return dim_err("query network does not match config");
        }
        if self.keys.heads.len() != c.heads {
            return dim_err("head count does not match config");
        }
        for h in &self.keys.heads {
            for (j, t) in h.halves.iter().enumerate() {
                if t.rows() != c.half_len(j) || t.cols() != c.half_dim() {
                    return dim_err(format!("half-key table {j} has shape {}x{}", t.rows(), t.cols()));
                }
            }
        }
        if self.values.slots.rows() != c.slots() || self.values.slots.cols() != c.d_v {
            return dim_err("value table does not match config");
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &DenseMatrix, mode: Mode) -> Result<MemoryOutput> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let (proj, proj_cache) = self.query.projection.forward(x)?;
                let (queries, bn_cache) = self.query.bn.forward_train(&proj)?;
                let mut out = self.read(&queries)?;
                out.cache = Some(MemoryCache {
                    projection: proj_cache,
                    bn: bn_cache,
                    queries,
                });
                Ok(out)
            }
        }
    }

    /// Eval-mode forward using batchnorm running statistics. Read-only.
    pub fn forward_eval(&self, x: &DenseMatrix) -> Result<MemoryOutput> {
        let proj = self.query.projection.apply(x)?;
        let queries = self.query.bn.forward_eval(&proj)?;
        self.read(&queries)
    }

    /// Queries (batch × d_q) without touching batchnorm statistics.
    pub fn queries_eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.query.bn.forward_eval(&self.query.projection.apply(x)?)
    }

    /// Selection and value aggregation for precomputed queries.
    pub fn read(&self, queries: &DenseMatrix) -> Result<MemoryOutput> {
        let c = &self.config;
        if queries.cols() != c.d_q {
            return dim_err(format!("queries have width {}, expected {}", queries.cols(), c.d_q));
        }
        let (dh, hd) = (c.half_dim(), c.head_dim());
        let batch = queries.rows();
        let mut ops = OpCounts::default();
        let mut selections = Vec::with_capacity(batch * c.heads);
        let mut output = DenseMatrix::zeros(batch, c.d_v);
        for b in 0..batch {
            let q = queries.row(b);
            for (h, keys) in self.keys.heads.iter().enumerate() {
                let q1 = &q[h * hd..h * hd + dh];
                let q2 = &q[h * hd + dh..(h + 1) * hd];
                let top1 = half_topk(q1, keys.k1(), c.k, c.distance, &mut ops);
                let top2 = half_topk(q2, keys.k2(), c.k, c.distance, &mut ops);
                let best = combine_topk(&top1, &top2, c.n2, c.k, &mut ops);
                let indices: Vec<usize> = best.iter().map(|p| p.0).collect();
                let scores: Vec<f64> = best.iter().map(|p| p.1).collect();
                let mut weights = scores.clone();
                softmax_in_place(&mut weights);
                let out = output.row_mut(b);
                for (&i, &w) in indices.iter().zip(&weights) {
                    for (o, v) in out.iter_mut().zip(self.values.row(i)) {
                        *o += w * v;
                    }
                }
                ops.value_reads += indices.len() as u64;
                selections.push(Selection {
                    indices,
                    scores,
                    weights,
                });
            }
        }
        Ok(MemoryOutput {
            output,
            selections,
            heads: c.heads,
            ops,
            cache: None,
        })
    }

    /// Backward pass for a train-mode forward.
    ///
    /// Value gradients are emitted only for selected slots
    /// (`dL/dv_i = Σ w_i · dL/dm`); score gradients go through the softmax
    /// Jacobian into both half-keys and the query, then through batchnorm
    /// and the projection.
    pub fn backward(&self, out: &MemoryOutput, dm: &DenseMatrix) -> Result<MemoryGrads> {
        let cache = out.cache.as_ref().ok_or_else(|| {
            PkmError::State("memory backward needs a train-mode forward cache".into())
        })?;
        let c = &self.config;
        let batch = out.batch_size();
        if dm.rows() != batch || dm.cols() != c.d_v {
            return dim_err("memory backward: upstream gradient shape");
        }
        let (dh, hd) = (c.half_dim(), c.head_dim());
        let mut dvalues = SparseRows::new(c.d_v);
        let mut dkeys: Vec<[SparseRows; 2]> = (0..c.heads)
            .map(|_| [SparseRows::new(dh), SparseRows::new(dh)])
            .collect();
        let mut dq = DenseMatrix::zeros(batch, c.d_q);
        let mut dweights = Vec::with_capacity(c.k);

        for b in 0..batch {
            let g = dm.row(b);
            let q = cache.queries.row(b);
            for h in 0..c.heads {
                let sel = out.selection(b, h);
                dweights.clear();
                for (&i, &w) in sel.indices.iter().zip(&sel.weights) {
                    let v = self.values.row(i);
                    dweights.push(g.iter().zip(v).map(|(a, b)| a * b).sum::<f64>());
                    dvalues.accumulate(i, w, g);
                }
                let mean: f64 = sel.weights.iter().zip(&dweights).map(|(w, d)| w * d).sum();
                let keys = &self.keys.heads[h];
                let dq_row = &mut dq.row_mut(b)[h * hd..(h + 1) * hd];
                let (dq1, dq2) = dq_row.split_at_mut(dh);
                let (q1, q2) = (&q[h * hd..h * hd + dh], &q[h * hd + dh..(h + 1) * hd]);
                for ((&i, &w), &dw) in sel.indices.iter().zip(&sel.weights).zip(&dweights) {
                    let ds = w * (dw - mean);
                    let (i1, i2) = c.split_index(i);
                    let [dk1, dk2] = &mut dkeys[h];
                    score_grad(q1, keys.k1().row(i1), c.distance, ds, dq1, dk1.row_mut(i1));
                    score_grad(q2, keys.k2().row(i2), c.distance, ds, dq2, dk2.row_mut(i2));
                }
            }
        }

        let (bn, dproj) = self.query.bn.backward(&cache.bn, &dq)?;
        let (projection, input) = self.query.projection.backward(&cache.projection, &dproj)?;
        Ok(MemoryGrads {
            values: dvalues,
            keys: dkeys,
            projection,
            bn,
            input,
        })
    }

    pub fn round_to_f32(&mut self) {
        self.query.projection.round_to_f32();
        self.query.bn.round_to_f32();
        for h in &mut self.keys.heads {
            for t in &mut h.halves {
                t.round_to_f32();
            }
        }
        self.values.slots.round_to_f32();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::Distance;

    fn layer(cfg: MemoryConfig, seed: u64) -> MemoryLayer {
        MemoryLayer::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn singleton_memory_returns_the_only_value() {
        let l = layer(MemoryConfig::new(3, 2, 4, 1, 1, 1, 1), 1);
        let x = random_batch(&mut Rng::new(2), 5, 3);
        let out = l.forward_eval(&x).unwrap();
        for b in 0..5 {
            assert_eq!(out.output.row(b), l.values.row(0));
            assert_eq!(out.selection(b, 0).weights, vec![1.0]);
        }
    }

    #[test]
    fn equal_scores_average_two_values() {
        // keys all zero: every combined score is 0, weights are 1/2.
        let mut l = layer(MemoryConfig::new(2, 2, 3, 2, 2, 2, 1), 3);
        for t in &mut l.keys.heads[0].halves {
            *t = DenseMatrix::zeros(2, 1);
        }
        let out = l.forward_eval(&DenseMatrix::from_rows(&[vec![0.3, -0.1]]).unwrap()).unwrap();
        let sel = out.selection(0, 0);
        assert_eq!(sel.indices, vec![0, 1]);
        for j in 0..3 {
            let mean = 0.5 * (l.values.row(0)[j] + l.values.row(1)[j]);
            assert!((out.output.get(0, j) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn score_evaluations_are_counted_exactly() {
        let cfg = MemoryConfig::new(4, 8, 2, 7, 5, 3, 2);
        let l = layer(cfg.clone(), 4);
        let out = l.forward_eval(&random_batch(&mut Rng::new(5), 6, 4)).unwrap();
        assert_eq!(out.ops.score_evals, 6 * cfg.score_evals_per_sample());
        assert_eq!(out.ops.score_evals, 6 * 2 * (7 + 5 + 9));
        assert_eq!(out.ops.value_reads, 6 * 2 * 3);
    }

    #[test]
    fn selections_are_distinct_and_normalized() {
        let mut cfg = MemoryConfig::new(4, 8, 2, 6, 6, 4, 2);
        cfg.distance = Distance::Cosine { alpha: 0.3 };
        let mut l = layer(cfg, 6);
        let out = l.forward(&random_batch(&mut Rng::new(7), 9, 4), Mode::Train).unwrap();
        for sel in &out.selections {
            let mut idx = sel.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 4);
            assert!((sel.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(sel.weights.iter().all(|w| *w > 0.0));
        }
    }

    #[test]
    fn eval_cache_cannot_backprop() {
        let l = layer(MemoryConfig::new(2, 2, 2, 2, 2, 1, 1), 1);
        let out = l.forward_eval(&DenseMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(l.backward(&out, &DenseMatrix::zeros(2, 2)), Err(PkmError::State(_))));
    }

    #[test]
    fn top1_has_no_score_gradient() {
        let mut l = layer(MemoryConfig::new(3, 4, 2, 4, 4, 1, 1), 8);
        let x = random_batch(&mut Rng::new(9), 4, 3);
        let out = l.forward(&x, Mode::Train).unwrap();
        let g = random_batch(&mut Rng::new(10), 4, 2);
        let grads = l.backward(&out, &g).unwrap();
        assert!(grads.projection.weight.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.keys[0].iter().all(|t| t.iter().all(|(_, r)| r.iter().all(|v| *v == 0.0))));
        for b in 0..4 {
            let slot = out.selection(b, 0).indices[0];
            let others: Vec<usize> = (0..4).filter(|&o| out.selection(o, 0).indices[0] == slot).collect();
            let mut expect = vec![0.0; 2];
            for o in others {
                expect[0] += g.get(o, 0);
                expect[1] += g.get(o, 1);
            }
            assert_eq!(grads.values.get(slot).unwrap(), &expect[..]);
        }
    }

    #[test]
    fn half_weights_split_value_gradient() {
        let mut l = layer(MemoryConfig::new(2, 2, 3, 2, 2, 2, 1), 3);
        for t in &mut l.keys.heads[0].halves {
            *t = DenseMatrix::zeros(2, 1);
        }
        let x = DenseMatrix::from_rows(&[vec![0.3, -0.1], vec![1.0, 2.0]]).unwrap();
        let out = l.forward(&x, Mode::Train).unwrap();
        let g = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let grads = l.backward(&out, &g).unwrap();
        assert_eq!(grads.values.get(0).unwrap(), &[0.5, 1.0, 1.5]);
        assert_eq!(grads.values.get(1).unwrap(), &[0.5, 1.0, 1.5]);
        assert_eq!(grads.values.len(), 2);
    }

    #[test]
    fn value_gradient_support_equals_selection() {
        let mut l = layer(MemoryConfig::new(4, 8, 3, 8, 8, 3, 2), 12);
        let x = random_batch(&mut Rng::new(13), 5, 4);
        let out = l.forward(&x, Mode::Train).unwrap();
        let grads = l.backward(&out, &random_batch(&mut Rng::new(14), 5, 3)).unwrap();
        let mut selected: Vec<usize> = out.selections.iter().flat_map(|s| s.indices.clone()).collect();
        selected.sort_unstable();
        selected.dedup();
        assert_eq!(grads.values.indices().collect::<Vec<_>>(), selected);
        assert!(grads.values.iter().all(|(_, r)| r.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = MemoryConfig::new(4, 8, 3, 8, 8, 3, 2);
        let x = random_batch(&mut Rng::new(1), 5, 4);
        let a = layer(cfg.clone(), 77).forward(&x, Mode::Train).unwrap();
        let b = layer(cfg, 77).forward(&x, Mode::Train).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.selections, b.selections);
    }
}
