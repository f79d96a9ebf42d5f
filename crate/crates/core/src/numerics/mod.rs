//! Dense numeric kernels with hand-written backward passes.

mod batchnorm;
mod gradcheck;
mod linear;
mod loss;
mod matrix;
mod rng;
mod sparse;

pub use batchnorm::{BatchNorm, BatchNormCache, BatchNormGrads};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use linear::{Linear, LinearCache, LinearGrads};
pub use loss::{cross_entropy, softmax, softmax_in_place};
pub use matrix::DenseMatrix;
pub use rng::Rng;
pub use sparse::SparseRows;

use serde::{Deserialize, Serialize};

/// Forward-pass mode. Train mode uses batch statistics and keeps caches for
/// backward; eval mode is read-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Rounds a value to the nearest f32 and widens it back.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
