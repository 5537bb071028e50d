//! In-context linear regression with a single linear self-attention layer.
//!
//! The crate covers the whole pipeline: task covariances and their hardness,
//! prompt sampling and embeddings, the LSA forward pass and its closed-form
//! optimum, gradient-descent training, test-time chain-of-thought rollouts,
//! closed-form error bounds, simplex-constrained task selection, and seeded
//! experiment drivers that write CSV results.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cot;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod lsa;
pub mod prompt;
pub mod rng;
pub mod select;
pub mod task;
pub mod train;

pub use error::{Error, Result};
