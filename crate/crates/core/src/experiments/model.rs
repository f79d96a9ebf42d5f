use super::spec::{ExperimentSpec, ModelSpec};
use crate::error::{dim_err, Result};
use crate::memory::{MemoryGrads, MemoryLayer, MemoryOutput};
use crate::numerics::{DenseMatrix, Linear, LinearCache, LinearGrads, Mode, Rng};
use crate::optim::{MemoryOptimizers, Optimizer, OptimizerConfig, StepStats};

/// `embed (d → e) → memory → head (d_v → m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyMemoryModel {
    pub embed: Linear,
    pub memory: MemoryLayer,
    pub head: Linear,
}

/// `embed (d → e) → W₁ (e → d_w) → ReLU → W₂ (d_w → e) → head (e → m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WideMlpBaseline {
    pub embed: Linear,
    pub w1: Linear,
    pub w2: Linear,
    pub head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Memory(ToyMemoryModel),
    WideMlp(WideMlpBaseline),
}

#[derive(Clone, Debug)]
pub enum ModelGrads {
    Memory {
        embed: LinearGrads,
        memory: MemoryGrads,
        head: LinearGrads,
    },
    WideMlp {
        embed: LinearGrads,
        w1: LinearGrads,
        w2: LinearGrads,
        head: LinearGrads,
    },
}

/// State kept between the train-mode forward and the backward pass.
#[derive(Debug)]
pub struct TrainForward {
    pub logits: DenseMatrix,
    pub memory: Option<MemoryOutput>,
    caches: Vec<LinearCache>,
    pre_relu: Option<DenseMatrix>,
}

impl Model {
    /// Draws parameters in order embed, body, head.
    pub fn new(spec: &ModelSpec, d: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            ModelSpec::Memory { embed_dim, memory } => {
                let embed = Linear::new(d, *embed_dim, rng);
                let memory = MemoryLayer::new(memory.clone(), rng)?;
                let head = Linear::new(memory.config.d_v, m, rng);
                Model::Memory(ToyMemoryModel { embed, memory, head })
            }
            ModelSpec::WideMlp { embed_dim, hidden } => Model::WideMlp(WideMlpBaseline {
                embed: Linear::new(d, *embed_dim, rng),
                w1: Linear::new(*embed_dim, *hidden, rng),
                w2: Linear::new(*hidden, *embed_dim, rng),
                head: Linear::new(*embed_dim, m, rng),
            }),
        })
    }

    pub fn d_in(&self) -> usize {
        self.embed().d_in()
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Memory(t) => t.head.d_out(),
            Model::WideMlp(w) => w.head.d_out(),
        }
    }

    pub fn embed(&self) -> &Linear {
        match self {
            Model::Memory(t) => &t.embed,
            Model::WideMlp(w) => &w.embed,
        }
    }

    pub fn memory(&self) -> Option<&MemoryLayer> {
        match self {
            Model::Memory(t) => Some(&t.memory),
            Model::WideMlp(_) => None,
        }
    }

    pub fn memory_mut(&mut self) -> Option<&mut MemoryLayer> {
        match self {
            Model::Memory(t) => Some(&mut t.memory),
            Model::WideMlp(_) => None,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Memory(t) => ModelSpec::Memory {
                embed_dim: t.embed.d_out(),
                memory: t.memory.config.clone(),
            },
            Model::WideMlp(w) => ModelSpec::WideMlp {
                embed_dim: w.embed.d_out(),
                hidden: w.w1.d_out(),
            },
        }
    }

    /// Read-only eval-mode forward: logits plus the memory read, if any.
    pub fn forward_eval(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Option<MemoryOutput>)> {
        if x.cols() != self.d_in() {
            return dim_err(format!("input width {} != model input {}", x.cols(), self.d_in()));
        }
        match self {
            Model::Memory(t) => {
                let e = t.embed.apply(x)?;
                let out = t.memory.forward_eval(&e)?;
                let logits = t.head.apply(&out.output)?;
                Ok((logits, Some(out)))
            }
            Model::WideMlp(w) => {
                let mut h = w.w1.apply(&w.embed.apply(x)?)?;
                relu(&mut h);
                Ok((w.head.apply(&w.w2.apply(&h)?)?, None))
            }
        }
    }

    /// Train-mode forward; updates batchnorm running statistics.
    pub fn forward_train(&mut self, x: &DenseMatrix) -> Result<TrainForward> {
        if x.cols() != self.d_in() {
            return dim_err(format!("input width {} != model input {}", x.cols(), self.d_in()));
        }
        match self {
            Model::Memory(t) => {
                let (e, c_embed) = t.embed.forward(x)?;
                let out = t.memory.forward(&e, Mode::Train)?;
                let (logits, c_head) = t.head.forward(&out.output)?;
                Ok(TrainForward {
                    logits,
                    memory: Some(out),
                    caches: vec![c_embed, c_head],
                    pre_relu: None,
                })
            }
            Model::WideMlp(w) => {
                let (e, c_embed) = w.embed.forward(x)?;
                let (h, c_w1) = w.w1.forward(&e)?;
                let mut a = h.clone();
                relu(&mut a);
                let (z, c_w2) = w.w2.forward(&a)?;
                let (logits, c_head) = w.head.forward(&z)?;
                Ok(TrainForward {
                    logits,
                    memory: None,
                    caches: vec![c_embed, c_w1, c_w2, c_head],
                    pre_relu: Some(h),
                })
            }
        }
    }

    pub fn backward(&self, fwd: &TrainForward, dlogits: &DenseMatrix) -> Result<ModelGrads> {
        match self {
            Model::Memory(t) => {
                let (head, dm) = t.head.backward(&fwd.caches[1], dlogits)?;
                let out = fwd
                    .memory
                    .as_ref()
                    .ok_or_else(|| crate::PkmError::State("forward has no memory output".into()))?;
                let memory = t.memory.backward(out, &dm)?;
                let (embed, _) = t.embed.backward(&fwd.caches[0], &memory.input)?;
                Ok(ModelGrads::Memory { embed, memory, head })
            }
            Model::WideMlp(w) => {
                let (head, dz) = w.head.backward(&fwd.caches[3], dlogits)?;
                let (w2, mut da) = w.w2.backward(&fwd.caches[2], &dz)?;
                let pre = fwd
                    .pre_relu
                    .as_ref()
                    .ok_or_else(|| crate::PkmError::State("forward has no hidden activations".into()))?;
                for (g, &h) in da.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                }
                let (w1, de) = w.w1.backward(&fwd.caches[1], &da)?;
                let (embed, _) = w.embed.backward(&fwd.caches[0], &de)?;
                Ok(ModelGrads::WideMlp { embed, w1, w2, head })
            }
        }
    }

    /// Dense parameter tensors as `(rows, width, data)`, in optimizer order.
    /// Memory keys and values are excluded; they live in [`MemoryOptimizers`].
    fn dense_params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Memory(t) => {
                let q = &mut t.memory.query;
                vec![
                    t.embed.weight.as_mut_slice(),
                    &mut t.embed.bias,
                    q.projection.weight.as_mut_slice(),
                    &mut q.projection.bias,
                    &mut q.bn.gamma,
                    &mut q.bn.beta,
                    t.head.weight.as_mut_slice(),
                    &mut t.head.bias,
                ]
            }
            Model::WideMlp(w) => vec![
                w.embed.weight.as_mut_slice(),
                &mut w.embed.bias,
                w.w1.weight.as_mut_slice(),
                &mut w.w1.bias,
                w.w2.weight.as_mut_slice(),
                &mut w.w2.bias,
                w.head.weight.as_mut_slice(),
                &mut w.head.bias,
            ],
        }
    }

    fn dense_shapes(&self) -> Vec<(usize, usize)> {
        let lin = |l: &Linear| [(l.weight.rows(), l.weight.cols()), (1, l.bias.len())];
        match self {
            Model::Memory(t) => {
                let d_q = t.memory.config.d_q;
                let mut v = lin(&t.embed).to_vec();
                v.extend(lin(&t.memory.query.projection));
                v.extend([(1, d_q), (1, d_q)]);
                v.extend(lin(&t.head));
                v
            }
            Model::WideMlp(w) => [&w.embed, &w.w1, &w.w2, &w.head].into_iter().flat_map(lin).collect(),
        }
    }

    pub fn build_optimizers(&self, cfg: OptimizerConfig, sparse_lr_multiplier: f64) -> ModelOptimizers {
        ModelOptimizers {
            dense: self.dense_shapes().into_iter().map(|(r, w)| cfg.build(r, w, 1.0)).collect(),
            memory: self
                .memory()
                .map(|m| MemoryOptimizers::new(&m.config, cfg, sparse_lr_multiplier)),
        }
    }

    /// One optimizer step. Values get a sparse step over touched rows only.
    pub fn apply_grads(&mut self, grads: &ModelGrads, opt: &mut ModelOptimizers) -> Result<StepStats> {
        let dense_grads: Vec<&[f64]> = match grads {
            ModelGrads::Memory { embed, memory, head } => vec![
                embed.weight.as_slice(),
                &embed.bias,
                memory.projection.weight.as_slice(),
                &memory.projection.bias,
                &memory.bn.gamma,
                &memory.bn.beta,
                head.weight.as_slice(),
                &head.bias,
            ],
            ModelGrads::WideMlp { embed, w1, w2, head } => vec![
                embed.weight.as_slice(),
                &embed.bias,
                w1.weight.as_slice(),
                &w1.bias,
                w2.weight.as_slice(),
                &w2.bias,
                head.weight.as_slice(),
                &head.bias,
            ],
        };
        if dense_grads.len() != opt.dense.len() {
            return dim_err("gradient and optimizer layouts differ");
        }
        let mut stats = StepStats::default();
        for ((p, g), o) in self.dense_params_mut().into_iter().zip(dense_grads).zip(&mut opt.dense) {
            let s = o.dense_step(p, g)?;
            stats.rows_written += s.rows_written;
            stats.values_written += s.values_written;
        }
        if let (Model::Memory(t), ModelGrads::Memory { memory: g, .. }) = (&mut *self, grads) {
            let mo = opt
                .memory
                .as_mut()
                .ok_or_else(|| crate::PkmError::State("memory model without memory optimizers".into()))?;
            for (h, keys) in t.memory.keys.heads.iter_mut().enumerate() {
                for j in 0..2 {
                    let table = &mut keys.halves[j];
                    let dense = g.keys[h][j].to_dense(table.rows());
                    mo.keys[h][j].dense_step(table.as_mut_slice(), dense.as_slice())?;
                }
            }
            let s = mo.values.sparse_step(t.memory.values.slots.as_mut_slice(), &g.values.to_pairs())?;
            stats.rows_written += s.rows_written;
            stats.values_written += s.values_written;
        }
        Ok(stats)
    }

    /// Rounds every parameter and batchnorm statistic to f32 precision.
    pub fn round_to_f32(&mut self) {
        match self {
            Model::Memory(t) => {
                t.embed.round_to_f32();
                t.memory.round_to_f32();
                t.head.round_to_f32();
            }
            Model::WideMlp(w) => {
                for l in [&mut w.embed, &mut w.w1, &mut w.w2, &mut w.head] {
                    l.round_to_f32();
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        let lin = |l: &Linear| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite());
        match self {
            Model::Memory(t) => {
                let q = &t.memory.query;
                lin(&t.embed)
                    && lin(&t.head)
                    && lin(&q.projection)
                    && t.memory.keys.is_finite()
                    && t.memory.values.slots.is_finite()
                    && [&q.bn.gamma, &q.bn.beta, &q.bn.running_mean, &q.bn.running_var]
                        .iter()
                        .all(|v| v.iter().all(|x| x.is_finite()))
            }
            Model::WideMlp(w) => [&w.embed, &w.w1, &w.w2, &w.head].into_iter().all(lin),
        }
    }
}

impl ModelGrads {
    /// L2 norms per named tensor group, for diagnostics.
    pub fn norms(&self) -> Vec<(&'static str, f64)> {
        let l2 = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lin = |g: &LinearGrads| (g.weight.frobenius_norm().powi(2) + l2(&g.bias).powi(2)).sqrt();
        match self {
            ModelGrads::Memory { embed, memory, head } => {
                let keys = memory
                    .keys
                    .iter()
                    .flat_map(|h| h.iter().map(|s| s.norm().powi(2)))
                    .sum::<f64>()
                    .sqrt();
                vec![
                    ("embed", lin(embed)),
                    ("projection", lin(&memory.projection)),
                    ("bn", (l2(&memory.bn.gamma).powi(2) + l2(&memory.bn.beta).powi(2)).sqrt()),
                    ("keys", keys),
                    ("values", memory.values.norm()),
                    ("head", lin(head)),
                ]
            }
            ModelGrads::WideMlp { embed, w1, w2, head } => vec![
                ("embed", lin(embed)),
                ("w1", lin(w1)),
                ("w2", lin(w2)),
                ("head", lin(head)),
            ],
        }
    }
}

/// Optimizer state for every trainable tensor of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptimizers {
    /// Dense tensors in model order: embed W/b, body, head W/b.
    pub dense: Vec<Optimizer>,
    pub memory: Option<MemoryOptimizers>,
}

impl ModelOptimizers {
    /// All states in checkpoint order: dense, then per-head keys, then values.
    pub fn states(&self) -> Vec<&Optimizer> {
        let mut v: Vec<&Optimizer> = self.dense.iter().collect();
        if let Some(m) = &self.memory {
            v.extend(m.keys.iter().flat_map(|k| k.iter()));
            v.push(&m.values);
        }
        v
    }

    pub fn states_mut(&mut self) -> Vec<&mut Optimizer> {
        let mut v: Vec<&mut Optimizer> = self.dense.iter_mut().collect();
        if let Some(m) = &mut self.memory {
            v.extend(m.keys.iter_mut().flat_map(|k| k.iter_mut()));
            v.push(&mut m.values);
        }
        v
    }
}

impl ExperimentSpec {
    pub fn build_model(&self, rng: &mut Rng) -> Result<Model> {
        Model::new(&self.model, self.dataset.d, self.dataset.m, rng)
    }
}

fn relu(x: &mut DenseMatrix) {
    for v in x.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryConfig;
    use crate::numerics::{cross_entropy, grad_check};

    fn small_memory() -> ModelSpec {
        ModelSpec::Memory {
            embed_dim: 6,
            memory: MemoryConfig::new(6, 4, 3, 4, 5, 2, 1),
        }
    }

    fn batch(rng: &mut Rng, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn dims_chain() {
        let mut rng = Rng::new(0);
        let model = Model::new(&small_memory(), 3, 7, &mut rng).unwrap();
        let x = batch(&mut rng, 5, 3);
        let (logits, out) = model.forward_eval(&x).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (5, 7));
        assert!(out.is_some());
        assert!(model.forward_eval(&batch(&mut rng, 5, 4)).is_err());
        let mlp = Model::new(&ModelSpec::WideMlp { embed_dim: 6, hidden: 9 }, 3, 7, &mut rng).unwrap();
        assert_eq!(mlp.forward_eval(&x).unwrap().0.cols(), 7);
        assert_eq!(mlp.spec(), ModelSpec::WideMlp { embed_dim: 6, hidden: 9 });
    }

    #[test]
    fn mlp_embed_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let model = Model::new(&ModelSpec::WideMlp { embed_dim: 5, hidden: 7 }, 3, 4, &mut rng).unwrap();
        let x = batch(&mut rng, 6, 3);
        let labels = vec![0, 1, 2, 3, 1, 0];
        let mut m = model.clone();
        let fwd = m.forward_train(&x).unwrap();
        let (_, dl) = cross_entropy(&fwd.logits, &labels).unwrap();
        let ModelGrads::WideMlp { embed, .. } = m.backward(&fwd, &dl).unwrap() else {
            unreachable!()
        };
        let point = model.embed().weight.as_slice().to_vec();
        let report = grad_check(
            |p| {
                let mut mm = model.clone();
                if let Model::WideMlp(w) = &mut mm {
                    w.embed.weight.as_mut_slice().copy_from_slice(p);
                }
                let logits = mm.forward_eval(&x).unwrap().0;
                cross_entropy(&logits, &labels).unwrap().0
            },
            &point,
            embed.weight.as_slice(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn memory_head_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let model = Model::new(&small_memory(), 3, 4, &mut rng).unwrap();
        let x = batch(&mut rng, 5, 3);
        let labels = vec![0, 1, 2, 3, 1];
        let mut m = model.clone();
        let fwd = m.forward_train(&x).unwrap();
        let (_, dl) = cross_entropy(&fwd.logits, &labels).unwrap();
        let ModelGrads::Memory { head, .. } = m.backward(&fwd, &dl).unwrap() else {
            unreachable!()
        };
        let point = match &model {
            Model::Memory(t) => t.head.weight.as_slice().to_vec(),
            _ => unreachable!(),
        };
        let memory_out = fwd.memory.as_ref().unwrap().output.clone();
        let report = grad_check(
            |p| {
                let w = DenseMatrix::from_vec(4, 3, p.to_vec()).unwrap();
                let Model::Memory(t) = &model else { unreachable!() };
                let head = Linear::from_parts(w, t.head.bias.clone()).unwrap();
                cross_entropy(&head.apply(&memory_out).unwrap(), &labels).unwrap().0
            },
            &point,
            head.weight.as_slice(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn optimizer_layout_matches_params() {
        let mut rng = Rng::new(1);
        for spec in [small_memory(), ModelSpec::WideMlp { embed_dim: 4, hidden: 3 }] {
            let mut model = Model::new(&spec, 2, 3, &mut rng).unwrap();
            let opt = model.build_optimizers(OptimizerConfig::default(), 10.0);
            let shapes = model.dense_shapes();
            let params = model.dense_params_mut();
            assert_eq!(params.len(), opt.dense.len());
            for ((p, (r, w)), o) in params.iter().zip(shapes).zip(&opt.dense) {
                assert_eq!(p.len(), r * w);
                assert_eq!(o.rows(), r);
            }
        }
    }

    #[test]
    fn a_training_step_reduces_loss() {
        let mut rng = Rng::new(2);
        let mut model = Model::new(&small_memory(), 3, 4, &mut rng).unwrap();
        let mut opt = model.build_optimizers(OptimizerConfig::default(), 10.0);
        let x = batch(&mut rng, 8, 3);
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let loss = |m: &Model| cross_entropy(&m.forward_eval(&x).unwrap().0, &labels).unwrap().0;
        let mut first = None;
        for _ in 0..50 {
            let fwd = model.forward_train(&x).unwrap();
            let (l, dl) = cross_entropy(&fwd.logits, &labels).unwrap();
            first.get_or_insert(l);
            let g = model.backward(&fwd, &dl).unwrap();
            model.apply_grads(&g, &mut opt).unwrap();
        }
        let fwd = model.forward_train(&x).unwrap();
        let (l, _) = cross_entropy(&fwd.logits, &labels).unwrap();
        assert!(l < first.unwrap(), "{l} vs {first:?}");
        assert!(loss(&model).is_finite());
        assert!(model.is_finite());
    }
}
