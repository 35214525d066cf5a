//! Federated robust clustering of precomputed text embeddings.
//!
//! Clients label their shards with entropic optimal transport, down-weight
//! unreliable pseudo-labels with a Gaussian-uniform mixture, and align
//! their cluster centers through a server that aggregates them each round.

// Index loops mirror the math; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federated;
pub mod gum;
mod jsonfmt;
pub mod model;
pub mod numerics;
pub mod sinkhorn;

pub use error::{Error, Result};
