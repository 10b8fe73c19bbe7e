//! Counterfactual multi-hop QA at desk scale.
//!
//! The pipeline: generate a synthetic 2-hop dataset ([`corpus`]), factor each
//! example into per-paragraph triples and build counterfactual variants
//! ([`factorize`]), run a tiny trainable encoder with QA heads ([`model`]),
//! fuse the causal-effect branches with a learnable bias ([`effects`]), train
//! ([`trainer`]), carve test-only probe pairs ([`probe`]), and score both the
//! original split and the probe to separate real multi-hop credit from
//! disconnected reasoning ([`metrics`]).

pub mod corpus;
pub mod effects;
pub mod error;
pub mod factorize;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod probe;
pub mod trainer;
pub mod util;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
