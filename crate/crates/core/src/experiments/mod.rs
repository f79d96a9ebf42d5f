//! The memorization harness: models, training loop with re-initialization
//! scheduling, evaluation and checkpoints.

mod checkpoint;
mod model;
mod spec;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{Model, ModelGrads, ModelOptimizers, ToyMemoryModel, WideMlpBaseline};
pub use spec::{ExperimentSpec, ModelSpec};
pub use train::{
    evaluate, evaluate_model, logits, run_to_dir, train, EpochRecord, EvalReport, Record, RunArtifacts, Split,
    TrainOutcome, CHECKPOINT_FILE, DIAGNOSTIC_FILE, METRICS_FILE, RESOLVED_CONFIG_FILE,
};
pub use model::TrainForward;
