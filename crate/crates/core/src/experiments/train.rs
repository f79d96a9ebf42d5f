use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::model::{Model, ModelOptimizers};
use super::spec::ExperimentSpec;
use crate::data::RandomLabelDataset;
use crate::error::{dim_err, PkmError, Result};
use crate::metrics::{kl_to_uniform, nonzero_fraction, AccessMass};
use crate::numerics::{cross_entropy, DenseMatrix, Rng};
use crate::reinit::{reinitialize, ReinitReport, UtilizationState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const DIAGNOSTIC_FILE: &str = "nonfinite-dump.json";

/// Evaluation batch size. Fixed so that evaluating a checkpoint reproduces
/// the metrics reported at the end of training.
const EVAL_BATCH: usize = 256;

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const REINIT_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Running averages over the epoch's train-mode batches.
    Train,
    /// Eval-mode pass over the training set.
    Eval,
    /// Eval-mode pass after the final f32 rounding; matches the checkpoint.
    Final,
}

/// Eval-mode metrics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// Fraction of half-key slots selected at least once, per head and half.
    pub util_frac: Vec<[f64; 2]>,
    /// Fraction of value slots selected at least once.
    pub value_util: Option<f64>,
    /// KL divergence (nats) of the value access distribution to uniform.
    pub kl: Option<f64>,
    pub score_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub util_frac: Vec<[f64; 2]>,
    pub value_util: Option<f64>,
    pub kl: Option<f64>,
    pub score_ops: u64,
    /// Half-key slots replaced so far.
    pub replaced_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms_per_step: Option<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header {
        version: String,
        spec: ExperimentSpec,
        steps_per_epoch: u64,
        parameters: u64,
        kl_log: String,
    },
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        top1: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ms_per_step: Option<f64>,
    },
    Epoch(EpochRecord),
    Reinit {
        epoch: usize,
        #[serde(flatten)]
        report: ReinitReport,
    },
    Done {
        epochs_run: usize,
        step: u64,
        stopped_early: bool,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, rounded to f32.
    pub model: Model,
    pub optimizers: ModelOptimizers,
    pub dataset: RandomLabelDataset,
    pub final_eval: EvalReport,
    pub epochs_run: usize,
    pub steps: u64,
    pub reinits: Vec<ReinitReport>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.model.clone(), Some(self.optimizers.clone()))
    }
}

/// Rank of `label` among the logits: strictly larger logits, then equal
/// logits at lower class index, come first.
fn label_rank(logits: &[f64], label: usize) -> usize {
    let l = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|(j, &v)| v > l || (v == l && *j < label))
        .count()
}

fn per_sample_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Eval-mode metrics for `model` on `ds`, with selection counters on a
/// fresh utilization state.
pub fn evaluate_model(model: &Model, ds: &RandomLabelDataset) -> Result<EvalReport> {
    if model.d_in() != ds.d || model.n_classes() != ds.m {
        return dim_err(format!(
            "model maps {} -> {}, dataset has d = {}, m = {}",
            model.d_in(),
            model.n_classes(),
            ds.d,
            ds.m
        ));
    }
    if ds.n == 0 {
        return Err(PkmError::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut util = model.memory().map(|m| UtilizationState::for_layer(m, 1));
    let mut mass = model.memory().map(|m| AccessMass::new(m.config.slots()));
    let mut value_hits = model.memory().map(|m| vec![0u64; m.config.slots()]);
    let (mut loss, mut top1, mut top5, mut ops) = (0.0, 0usize, 0usize, 0u64);
    let idx: Vec<usize> = (0..ds.n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let (logits, out) = model.forward_eval(&x)?;
        for (b, &label) in y.iter().enumerate() {
            let row = logits.row(b);
            loss += per_sample_loss(row, label);
            let rank = label_rank(row, label);
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < 5);
        }
        if let Some(out) = out {
            ops += out.ops.score_evals;
            util.as_mut().expect("memory model").observe(&out)?;
            mass.as_mut().expect("memory model").observe(&out);
            let hits = value_hits.as_mut().expect("memory model");
            for s in &out.selections {
                for &i in &s.indices {
                    hits[i] += 1;
                }
            }
        }
    }
    let n = ds.n as f64;
    Ok(EvalReport {
        samples: ds.n,
        loss: loss / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        util_frac: util.map(|u| u.utilization_fraction()).unwrap_or_default(),
        value_util: value_hits.map(|h| nonzero_fraction(&h)),
        kl: mass.map(|m| kl_to_uniform(&m)).transpose()?,
        score_ops: ops,
    })
}

/// Eval-mode metrics for a checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, ds: &RandomLabelDataset) -> Result<EvalReport> {
    evaluate_model(&checkpoint.model, ds)
}

/// Mini-batches of a permutation. A trailing singleton is merged into the
/// previous batch since train-mode batchnorm needs two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

fn eval_record(epoch: usize, step: u64, split: Split, r: &EvalReport, replaced_total: usize) -> Record {
    Record::Epoch(EpochRecord {
        epoch,
        step,
        split,
        loss: r.loss,
        top1: r.top1,
        top5: r.top5,
        util_frac: r.util_frac.clone(),
        value_util: r.value_util,
        kl: r.kl,
        score_ops: r.score_ops,
        replaced_total,
        ms_per_step: None,
    })
}

fn parameter_count(model: &Model) -> u64 {
    let opt = model.build_optimizers(Default::default(), 1.0);
    opt.states()
        .iter()
        .map(|s| match s {
            crate::optim::Optimizer::Adam(a) => (a.rows() * a.width()) as u64,
            crate::optim::Optimizer::Sgd(g) => (g.rows() * g.width) as u64,
        })
        .sum()
}

/// Runs `spec` to completion, passing every metrics record to `sink`.
///
/// One seed drives the data (unless the dataset pins its own), the
/// initialization, the shuffling and the re-initialization noise through
/// separate streams, so runs that differ only in the reinit switch share
/// data, initialization and batch order up to the first re-initialization.
pub fn train(spec: &ExperimentSpec, sink: &mut dyn FnMut(&Record) -> Result<()>) -> Result<TrainOutcome> {
    spec.validate()?;
    let ds = RandomLabelDataset::generate(spec.dataset.n, spec.dataset.d, spec.dataset.m, spec.data_seed())?;
    let mut init_rng = Rng::with_stream(spec.seed, INIT_STREAM);
    let mut shuffle_rng = Rng::with_stream(spec.seed, SHUFFLE_STREAM);
    let mut reinit_rng = Rng::with_stream(spec.seed, REINIT_STREAM);

    let mut model = spec.build_model(&mut init_rng)?;
    let mut opt = model.build_optimizers(spec.optimizer, spec.sparse_lr_multiplier);
    let mut order: Vec<usize> = (0..ds.n).collect();
    let steps_per_epoch = batches(&order, spec.batch_size).len() as u64;

    let reinit_cfg = spec.reinit.clone().map(|mut r| {
        r.trigger_period.get_or_insert(steps_per_epoch);
        r
    });
    let window = reinit_cfg.as_ref().map_or(5, |r| r.window);
    let mut util = model.memory().map(|m| UtilizationState::for_layer(m, window));

    let mut resolved = spec.clone();
    resolved.reinit = reinit_cfg.clone();
    sink(&Record::Header {
        version: crate::VERSION.to_string(),
        spec: resolved,
        steps_per_epoch,
        parameters: parameter_count(&model),
        kl_log: "natural".into(),
    })?;

    let mut step = 0u64;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    let mut replaced_total = 0usize;
    let mut reinits = Vec::new();
    let mut last_norms: Vec<(&'static str, f64)> = Vec::new();

    for epoch in 0..spec.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut top1, mut top5, mut seen, mut ops) = (0.0, 0usize, 0usize, 0usize, 0u64);
        let started = Instant::now();
        for idx in batches(&order, spec.batch_size) {
            let step_start = Instant::now();
            let (x, y) = ds.batch(idx);
            let fwd = model.forward_train(&x)?;
            let (loss, dlogits) = cross_entropy(&fwd.logits, &y)?;
            if !loss.is_finite() || !fwd.logits.is_finite() {
                return Err(PkmError::NonFinite(diagnostic(spec, epoch, step, idx, loss, &last_norms)));
            }
            let grads = model.backward(&fwd, &dlogits)?;
            last_norms = grads.norms();
            model.apply_grads(&grads, &mut opt)?;
            if let (Some(u), Some(out)) = (util.as_mut(), fwd.memory.as_ref()) {
                u.observe(out)?;
                ops += out.ops.score_evals;
            }
            let mut batch_top1 = 0usize;
            for (b, &label) in y.iter().enumerate() {
                let rank = label_rank(fwd.logits.row(b), label);
                batch_top1 += usize::from(rank == 0);
                top5 += usize::from(rank < 5);
            }
            top1 += batch_top1;
            loss_sum += loss * y.len() as f64;
            seen += y.len();
            step += 1;
            if spec.step_log_interval > 0 && step % spec.step_log_interval == 0 {
                sink(&Record::Step {
                    step,
                    epoch,
                    loss,
                    top1: batch_top1 as f64 / y.len() as f64,
                    ms_per_step: spec
                        .log_timing
                        .then(|| step_start.elapsed().as_secs_f64() * 1e3),
                })?;
            }
        }
        let ms_per_step = spec
            .log_timing
            .then(|| started.elapsed().as_secs_f64() * 1e3 / steps_per_epoch as f64);
        let n = seen as f64;
        sink(&Record::Epoch(EpochRecord {
            epoch,
            step,
            split: Split::Train,
            loss: loss_sum / n,
            top1: top1 as f64 / n,
            top5: top5 as f64 / n,
            util_frac: util.as_ref().map(|u| u.utilization_fraction()).unwrap_or_default(),
            value_util: None,
            kl: None,
            score_ops: ops,
            replaced_total,
            ms_per_step,
        }))?;

        let eval = evaluate_model(&model, &ds)?;
        sink(&eval_record(epoch, step, Split::Eval, &eval, replaced_total))?;
        epochs_run = epoch + 1;
        if spec.early_stop_top1.is_some_and(|t| eval.top1 >= t) {
            stopped_early = true;
        }

        if let Some(u) = util.as_mut() {
            u.record_reading(u.mean_utilization());
            if let Some(rc) = &reinit_cfg {
                let last = stopped_early || epoch + 1 == spec.epochs;
                if !last && u.plateau_reached(rc, step) {
                    let (Model::Memory(t), Some(mo)) = (&mut model, opt.memory.as_mut()) else {
                        unreachable!("reinit is validated to need a memory model")
                    };
                    let report = reinitialize(&mut t.memory, u, mo, rc, &mut reinit_rng, step)?;
                    replaced_total += report.total_replaced();
                    sink(&Record::Reinit {
                        epoch,
                        report: report.clone(),
                    })?;
                    reinits.push(report);
                }
            }
        }
        if stopped_early {
            break;
        }
    }

    let mut ckpt = Checkpoint::new(model, Some(opt));
    ckpt.round_to_f32();
    let Checkpoint { model, optimizers } = ckpt;
    let final_eval = evaluate_model(&model, &ds)?;
    sink(&eval_record(epochs_run, step, Split::Final, &final_eval, replaced_total))?;
    sink(&Record::Done {
        epochs_run,
        step,
        stopped_early,
    })?;
    Ok(TrainOutcome {
        model,
        optimizers: optimizers.expect("optimizers kept"),
        dataset: ds,
        final_eval,
        epochs_run,
        steps: step,
        reinits,
    })
}

fn diagnostic(
    spec: &ExperimentSpec,
    epoch: usize,
    step: u64,
    batch: &[usize],
    loss: f64,
    norms: &[(&'static str, f64)],
) -> String {
    serde_json::json!({
        "error": "non-finite loss",
        "epoch": epoch,
        "step": step,
        "loss": format!("{loss}"),
        "lr": spec.optimizer.lr(),
        "sparse_lr": spec.optimizer.lr() * spec.sparse_lr_multiplier,
        "last_batch": batch,
        "last_grad_norms": norms.iter().map(|(k, v)| (k.to_string(), format!("{v}"))).collect::<std::collections::BTreeMap<_, _>>(),
    })
    .to_string()
}

/// Files written by [`run_to_dir`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub resolved_config: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains `spec`, writing `metrics.jsonl`, `final.ckpt` and
/// `resolved-config.json` under `out`. On a non-finite loss the diagnostic
/// is also written to `nonfinite-dump.json`.
pub fn run_to_dir(spec: &ExperimentSpec, out: &Path) -> Result<RunArtifacts> {
    spec.validate()?;
    std::fs::create_dir_all(out)?;
    let resolved_config = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&resolved_config, spec.to_json() + "\n")?;
    let metrics = out.join(METRICS_FILE);
    let mut w = BufWriter::new(File::create(&metrics)?);
    let result = train(spec, &mut |r: &Record| {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
        if !matches!(r, Record::Step { .. }) {
            w.flush()?;
        }
        Ok(())
    });
    w.flush()?;
    let outcome = match result {
        Ok(o) => o,
        Err(PkmError::NonFinite(dump)) => {
            std::fs::write(out.join(DIAGNOSTIC_FILE), &dump)?;
            return Err(PkmError::NonFinite(dump));
        }
        Err(e) => return Err(e),
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &outcome.checkpoint())?;
    Ok(RunArtifacts {
        metrics,
        checkpoint,
        resolved_config,
        outcome,
    })
}

/// Logits for a batch, for callers that only need a forward pass.
pub fn logits(model: &Model, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(model.forward_eval(x)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ModelSpec;
    use crate::memory::MemoryConfig;
    use crate::reinit::ReinitConfig;

    fn tiny(seed: u64) -> ExperimentSpec {
        let mut s = ExperimentSpec::desk_memory(2, false, seed);
        s.dataset.n = 96;
        s.model = ModelSpec::Memory {
            embed_dim: 16,
            memory: MemoryConfig::new(16, 8, 8, 8, 8, 3, 2),
        };
        s.batch_size = 32;
        s.epochs = 3;
        s
    }

    #[test]
    fn batches_merge_a_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn label_rank_breaks_ties_by_index() {
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 0), 0);
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 1), 1);
        assert_eq!(label_rank(&[0.0, 1.0, 2.0], 0), 2);
    }

    #[test]
    fn records_stream_and_final_matches_evaluate() {
        let spec = tiny(5);
        let mut records = Vec::new();
        let out = train(&spec, &mut |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert!(matches!(records[0], Record::Header { .. }));
        assert!(matches!(records.last(), Some(Record::Done { .. })));
        let again = evaluate(&out.checkpoint(), &out.dataset).unwrap();
        assert_eq!(again, out.final_eval);
        assert!(again.top5 >= again.top1);
        for r in &records {
            let line = serde_json::to_string(r).unwrap();
            let back: Record = serde_json::from_str(&line).unwrap();
            assert_eq!(serde_json::to_string(&back).unwrap(), line);
        }
    }

    #[test]
    fn zero_epochs_checkpoint_is_the_initialization() {
        let mut spec = tiny(8);
        spec.epochs = 0;
        let out = train(&spec, &mut |_| Ok(())).unwrap();
        let mut init = spec.build_model(&mut Rng::with_stream(spec.seed, INIT_STREAM)).unwrap();
        init.round_to_f32();
        assert_eq!(out.model, init);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let out = train(&tiny(1), &mut |_| Ok(())).unwrap();
        let other = RandomLabelDataset::generate(10, 3, 10, 0).unwrap();
        assert!(evaluate(&out.checkpoint(), &other).is_err());
    }

    #[test]
    fn reinit_runs_emit_reinit_records() {
        let mut spec = tiny(2);
        spec.epochs = 12;
        spec.early_stop_top1 = None;
        spec.reinit = Some(ReinitConfig {
            window: 2,
            plateau_delta: 1.0,
            ..ReinitConfig::default()
        });
        let mut n = 0;
        let out = train(&spec, &mut |r| {
            n += usize::from(matches!(r, Record::Reinit { .. }));
            Ok(())
        })
        .unwrap();
        assert!(n > 0);
        assert_eq!(n, out.reinits.len());
    }

    #[test]
    fn exploding_learning_rate_aborts_with_a_dump() {
        let mut spec = tiny(3);
        spec.optimizer = crate::optim::OptimizerConfig::Sgd {
            lr: 1e300,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        match train(&spec, &mut |_| Ok(())) {
            Err(PkmError::NonFinite(msg)) => {
                let v: serde_json::Value = serde_json::from_str(&msg).unwrap();
                assert!(v["last_batch"].is_array());
                assert!(v["lr"].is_number());
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
