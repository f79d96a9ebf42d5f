//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PKM1" | u32 version | u32 len | config JSON (len bytes) | u32 model kind
//! | parameter segments | optimizer segment | u32 CRC-32 of all prior bytes
//! ```
//!
//! A linear segment is `u32 out, u32 in, f32[out·in] W, f32[out] b`. The
//! memory segment is `u32 d_in, d_q, d_v, n1, n2, k, heads, distance tag,
//! f32 alpha`, then per head `K₁, K₂`, then the value table, then the query
//! projection (linear segment) and batchnorm (`u32 dim`, gamma, beta,
//! running mean, running var). The optimizer segment is `u32 present`, and
//! if present `u32 count` states, each `u32 kind, u32 rows, u32 width`
//! followed by Adam `u64[rows] steps, f32 m, f32 v` or SGD `f32 velocity`.
//! Hyperparameters live in the config block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelOptimizers, ToyMemoryModel, WideMlpBaseline};
use super::spec::ModelSpec;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{PkmError, Result};
use crate::memory::{HeadKeys, MemoryLayer, ProductKeyStore, QueryNetwork, ValueTable};
use crate::numerics::{round_f32, BatchNorm, DenseMatrix, Linear};
use crate::optim::{Optimizer, OptimizerConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKM1";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_MEMORY: u32 = 1;
const KIND_WIDE_MLP: u32 = 2;
const OPT_ADAM: u32 = 0;
const OPT_SGD: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ModelSpec,
    d: usize,
    m: usize,
    optimizer: Option<OptimizerConfig>,
    sparse_lr_multiplier: f64,
}

/// A model plus, optionally, the optimizer state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizers: Option<ModelOptimizers>,
}

impl Checkpoint {
    pub fn new(model: Model, optimizers: Option<ModelOptimizers>) -> Self {
        Self { model, optimizers }
    }

    /// Rounds everything that is stored as f32, so that a save/load cycle
    /// reproduces `self` exactly.
    pub fn round_to_f32(&mut self) {
        self.model.round_to_f32();
        if let Some(o) = &mut self.optimizers {
            for s in o.states_mut() {
                round_state(s);
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (optimizer, mult) = match &self.optimizers {
            Some(o) => {
                let first = o
                    .dense
                    .first()
                    .ok_or_else(|| PkmError::State("optimizer set is empty".into()))?;
                let mult = o.memory.as_ref().map_or(1.0, |m| m.values.lr_multiplier());
                (Some(optimizer_config(first)), mult)
            }
            None => (None, 1.0),
        };
        let block = ConfigBlock {
            model: self.model.spec(),
            d: self.model.d_in(),
            m: self.model.n_classes(),
            optimizer,
            sparse_lr_multiplier: mult,
        };
        let json = serde_json::to_vec(&block)?;

        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.dim(json.len())?;
        w.bytes(&json);
        match &self.model {
            Model::Memory(t) => {
                w.u32(KIND_MEMORY);
                write_linear(&mut w, &t.embed)?;
                write_memory(&mut w, &t.memory)?;
                write_linear(&mut w, &t.head)?;
            }
            Model::WideMlp(m) => {
                w.u32(KIND_WIDE_MLP);
                for l in [&m.embed, &m.w1, &m.w2, &m.head] {
                    write_linear(&mut w, l)?;
                }
            }
        }
        match &self.optimizers {
            None => w.u32(0),
            Some(o) => {
                w.u32(1);
                let states = o.states();
                w.dim(states.len())?;
                for s in states {
                    write_state(&mut w, s)?;
                }
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    /// Parses a checkpoint. Any error leaves nothing behind.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = ByteReader::new(bytes);
        if head.take(4)? != CHECKPOINT_MAGIC {
            return Err(PkmError::Checkpoint {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = head.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PkmError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return head.error("truncated before checksum");
        }
        let body = &bytes[..bytes.len() - 4];
        let mut r = ByteReader::new(body);
        r.take(8)?;
        let len = r.dim()?;
        let json_at = r.offset();
        let block: ConfigBlock = serde_json::from_slice(r.take(len)?).map_err(|e| PkmError::Checkpoint {
            offset: json_at,
            msg: format!("config block: {e}"),
        })?;
        if let Err(e) = block.model.validate() {
            return Err(PkmError::Checkpoint {
                offset: json_at,
                msg: format!("config block: {e}"),
            });
        }

        let kind_at = r.offset();
        let model = match (r.u32()?, &block.model) {
            (KIND_MEMORY, ModelSpec::Memory { embed_dim, memory }) => {
                let embed = read_linear(&mut r, *embed_dim, block.d)?;
                let memory = read_memory(&mut r, memory)?;
                let head = read_linear(&mut r, block.m, memory.config.d_v)?;
                Model::Memory(ToyMemoryModel { embed, memory, head })
            }
            (KIND_WIDE_MLP, ModelSpec::WideMlp { embed_dim, hidden }) => Model::WideMlp(WideMlpBaseline {
                embed: read_linear(&mut r, *embed_dim, block.d)?,
                w1: read_linear(&mut r, *hidden, *embed_dim)?,
                w2: read_linear(&mut r, *embed_dim, *hidden)?,
                head: read_linear(&mut r, block.m, *embed_dim)?,
            }),
            (k, _) => {
                return Err(PkmError::Checkpoint {
                    offset: kind_at,
                    msg: format!("model kind {k} does not match the config block"),
                })
            }
        };

        let optimizers = match r.u32()? {
            0 => None,
            1 => {
                let cfg = match block.optimizer {
                    Some(c) => c,
                    None => return r.error("optimizer state without optimizer config"),
                };
                let mut opt = model.build_optimizers(cfg, block.sparse_lr_multiplier);
                let count = r.dim()?;
                let mut states = opt.states_mut();
                if count != states.len() {
                    return r.error(format!("{count} optimizer states, model needs {}", states.len()));
                }
                for s in states.iter_mut() {
                    read_state(&mut r, s)?;
                }
                Some(opt)
            }
            f => return r.error(format!("bad optimizer flag {f}")),
        };
        if r.remaining() != 0 {
            return r.error(format!("{} trailing bytes", r.remaining()));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if stored != crc32fast::hash(body) {
            return Err(PkmError::Checkpoint {
                offset: body.len(),
                msg: "checksum mismatch".into(),
            });
        }
        Ok(Self { model, optimizers })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn optimizer_config(o: &Optimizer) -> OptimizerConfig {
    match o {
        Optimizer::Adam(a) => OptimizerConfig::Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        },
        Optimizer::Sgd(s) => OptimizerConfig::Sgd {
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
        },
    }
}

fn round_state(o: &mut Optimizer) {
    let round = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = round_f32(*x));
    match o {
        Optimizer::Adam(a) => {
            round(&mut a.m);
            round(&mut a.v);
        }
        Optimizer::Sgd(s) => round(&mut s.velocity),
    }
}

fn write_linear(w: &mut ByteWriter, l: &Linear) -> Result<()> {
    w.dim(l.d_out())?;
    w.dim(l.d_in())?;
    w.f32s(l.weight.as_slice());
    w.f32s(&l.bias);
    Ok(())
}

fn read_linear(r: &mut ByteReader, d_out: usize, d_in: usize) -> Result<Linear> {
    let at = r.offset();
    let (o, i) = (r.dim()?, r.dim()?);
    if (o, i) != (d_out, d_in) {
        return Err(PkmError::Checkpoint {
            offset: at,
            msg: format!("linear segment is {o}x{i}, expected {d_out}x{d_in}"),
        });
    }
    let weight = DenseMatrix::from_vec(o, i, r.f32s(o * i)?)?;
    let bias = r.f32s(o)?;
    Linear::from_parts(weight, bias)
}

fn write_memory(w: &mut ByteWriter, layer: &MemoryLayer) -> Result<()> {
    let c = &layer.config;
    for v in [c.d_in, c.d_q, c.d_v, c.n1, c.n2, c.k, c.heads] {
        w.dim(v)?;
    }
    w.u32(c.distance.tag());
    w.f32(c.distance.alpha());
    for h in &layer.keys.heads {
        w.f32s(h.k1().as_slice());
        w.f32s(h.k2().as_slice());
    }
    w.f32s(layer.values.slots.as_slice());
    write_linear(w, &layer.query.projection)?;
    let bn = &layer.query.bn;
    w.dim(bn.dim())?;
    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
        w.f32s(v);
    }
    Ok(())
}

fn read_memory(r: &mut ByteReader, cfg: &crate::memory::MemoryConfig) -> Result<MemoryLayer> {
    let at = r.offset();
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.dim()?;
    }
    let tag = r.u32()?;
    let alpha = r.f32()?;
    let c = cfg;
    let expected = [c.d_in, c.d_q, c.d_v, c.n1, c.n2, c.k, c.heads];
    if dims != expected || tag != c.distance.tag() || alpha != round_f32(c.distance.alpha()) {
        return Err(PkmError::Checkpoint {
            offset: at,
            msg: format!("memory header {dims:?}/{tag} does not match config {expected:?}/{}", c.distance.tag()),
        });
    }
    let dh = c.half_dim();
    let mut heads = Vec::with_capacity(c.heads);
    for _ in 0..c.heads {
        let k1 = DenseMatrix::from_vec(c.n1, dh, r.f32s(c.n1 * dh)?)?;
        let k2 = DenseMatrix::from_vec(c.n2, dh, r.f32s(c.n2 * dh)?)?;
        heads.push(HeadKeys { halves: [k1, k2] });
    }
    let slots = DenseMatrix::from_vec(c.slots(), c.d_v, r.f32s(c.slots() * c.d_v)?)?;
    let projection = read_linear(r, c.d_q, c.d_in)?;
    let bn_at = r.offset();
    if r.dim()? != c.d_q {
        return Err(PkmError::Checkpoint {
            offset: bn_at,
            msg: "batchnorm width does not match d_q".into(),
        });
    }
    let mut bn = BatchNorm::with_params(c.d_q, c.bn_momentum, c.bn_eps, c.bn_affine)?;
    bn.gamma = r.f32s(c.d_q)?;
    bn.beta = r.f32s(c.d_q)?;
    bn.running_mean = r.f32s(c.d_q)?;
    bn.running_var = r.f32s(c.d_q)?;
    let layer = MemoryLayer {
        config: c.clone(),
        query: QueryNetwork { projection, bn },
        keys: ProductKeyStore { heads },
        values: ValueTable { slots },
    };
    layer.check_shapes()?;
    Ok(layer)
}

fn write_state(w: &mut ByteWriter, o: &Optimizer) -> Result<()> {
    match o {
        Optimizer::Adam(a) => {
            w.u32(OPT_ADAM);
            w.dim(a.rows())?;
            w.dim(a.width())?;
            for &s in &a.steps {
                w.u64(s);
            }
            w.f32s(&a.m);
            w.f32s(&a.v);
        }
        Optimizer::Sgd(s) => {
            w.u32(OPT_SGD);
            w.dim(s.rows())?;
            w.dim(s.width)?;
            w.f32s(&s.velocity);
        }
    }
    Ok(())
}

fn read_state(r: &mut ByteReader, o: &mut Optimizer) -> Result<()> {
    let at = r.offset();
    let (kind, rows, width) = (r.u32()?, r.dim()?, r.dim()?);
    let mismatch = |what: &str| PkmError::Checkpoint {
        offset: at,
        msg: format!("optimizer state {what} does not match the model"),
    };
    match o {
        Optimizer::Adam(a) => {
            if kind != OPT_ADAM {
                return Err(mismatch("kind"));
            }
            if (rows, width) != (a.rows(), a.width()) {
                return Err(mismatch("shape"));
            }
            for s in a.steps.iter_mut() {
                *s = r.u64()?;
            }
            a.m = r.f32s(rows * width)?;
            a.v = r.f32s(rows * width)?;
        }
        Optimizer::Sgd(s) => {
            if kind != OPT_SGD {
                return Err(mismatch("kind"));
            }
            if (rows, width) != (s.rows(), s.width) {
                return Err(mismatch("shape"));
            }
            s.velocity = r.f32s(rows * width)?;
        }
    }
    Ok(())
}
