//! Product-key memory layer with sparse top-k access.
//!
//! The crate provides the memory layer itself (`memory`), the dead-key
//! re-initialization procedure (`reinit`), dense and sparse optimizers
//! (`optim`), memory-health diagnostics (`metrics`), a synthetic
//! random-label dataset (`data`), the training harness (`experiments`) and
//! brute-force reference implementations used for cross-checking (`oracle`).

mod codec;
pub mod data;
pub mod error;
pub mod experiments;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod reinit;

pub use error::{PkmError, Result};

/// Library version recorded in run artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
