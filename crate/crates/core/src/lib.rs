//! Counterfactually regularized captioning on synthetic scene grids.
//!
//! A small autoregressive captioner is trained with negative log-likelihood,
//! then fine-tuned with a total-effect or natural-direct-effect regularizer
//! computed against images whose target entity has been masked out.

pub mod captioner;
pub mod cli;
pub mod causal;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod explain;
pub mod metrics;
pub mod scenegen;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
