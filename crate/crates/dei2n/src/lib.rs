//! Trigger-induced CTR prediction with instant user-interest modeling.
//!
//! The crate is built around a small define-by-run autodiff tape ([`autodiff`])
//! over dense `f64` tensors. On top of it sit:
//!
//! - [`encoding`]: raw interaction records -> fixed-width index/mask form
//! - [`model`]: the network itself (instant-interest mixing, self-attention
//!   over behavior history, hard/soft target attention, interaction layer)
//! - [`synth`]: a planted-signal synthetic session generator plus trigger
//!   attribution and negative sampling for generic event logs
//! - [`train`]: Adam training loop, evaluation, and the ablation suite
//! - [`metrics`] / [`report`]: AUC, relative improvement, per-page analysis
//! - [`checkpoint`]: versioned binary parameter snapshots
//!
//! Everything is deterministic under an explicit seed: data generation,
//! parameter init, batch order, dropout draws, and metric reduction.

// The tape allocates fresh output buffers per op and drops whole graphs per
// batch; glibc returns those large blocks to the OS immediately, so training
// spends a third of its wall time faulting pages back in. A pooling
// allocator removes that cost.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod report;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
