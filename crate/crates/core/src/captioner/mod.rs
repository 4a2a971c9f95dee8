//! The autoregressive captioner `f(s_j | image, prefix)`, its decoding
//! strategies, checkpoints, and reference models.

pub mod checkpoint;
pub mod decode;
pub mod distribution;
pub mod model;
pub mod oracle;
pub mod types;

pub use checkpoint::{Checkpoint, Stage};
pub use decode::{beam_search, decode, top_n_captions, DecodeStrategy, Hypothesis, TopCaptions};
pub use distribution::{CaptionModel, TokenDistribution};
pub use model::{ModelConfig, ModelParams, Pass, PARAM_NAMES};
pub use oracle::{HashNoiseModel, OracleCopyModel};
pub use types::{CaptionSample, CounterfactualSample, EntitySpan, SceneImage};

use crate::error::Result;
use crate::vocab::TokenId;

/// Next-token distribution of the trainable model.
pub fn forward(params: &ModelParams, image: &SceneImage, prefix: &[TokenId]) -> Result<TokenDistribution> {
    params.next_token(image, prefix)
}

/// Teacher-forced log-probability of a whole token sequence.
pub fn sequence_log_prob(params: &ModelParams, image: &SceneImage, tokens: &[TokenId]) -> Result<f64> {
    params.sequence_log_prob(image, tokens)
}
