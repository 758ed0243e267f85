//! Layer-wise pruning search and retraining for small convolutional
//! networks.
//!
//! The crate finds per-layer sparsity vectors that maximize the fraction of
//! pruned weights while keeping top-1 accuracy within a budget. Models are
//! evaluated by the built-in CPU engine or by an external process speaking a
//! line-delimited JSON protocol.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod model;
pub mod policy;
pub mod pruning;
pub mod retrain;
pub mod rng;
pub mod search;
pub mod sensitivity;
pub mod structural;
pub mod trace;

pub use error::{Error, Result};
