use super::model::{log_softmax_in_place, ModelParams};
use super::types::SceneImage;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Next-token log-probabilities over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    log_probs: Vec<f64>,
}

impl TokenDistribution {
    /// Normalizes arbitrary finite scores with a log-softmax.
    pub fn from_logits(mut logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("logits must be non-empty and finite"));
        }
        log_softmax_in_place(&mut logits);
        Ok(TokenDistribution { log_probs: logits })
    }

    /// Wraps log-probabilities that already sum to one.
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        let d = TokenDistribution { log_probs };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("distribution has non-finite log-probabilities"));
        }
        let total: f64 = self.log_probs.iter().map(|v| v.exp()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("distribution sums to {total}, not 1")));
        }
        Ok(())
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, token: TokenId) -> f64 {
        self.log_probs[token as usize]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|v| v.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &v) in self.log_probs.iter().enumerate() {
            if v > self.log_probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

/// Anything that maps an image and a token prefix to a next-token
/// distribution. The trainable captioner implements it, and so do the
/// reference models in [`super::oracle`].
pub trait CaptionModel {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    fn next_token(&self, image: &SceneImage, prefix: &[TokenId]) -> Result<TokenDistribution>;

    /// Teacher-forced log-probability rows: row `t` scores the token after
    /// `tokens[..t]`, for `t < tokens.len()`.
    fn teacher_forced(&self, image: &SceneImage, tokens: &[TokenId]) -> Result<Vec<TokenDistribution>> {
        (0..tokens.len())
            .map(|t| self.next_token(image, &tokens[..t]))
            .collect()
    }

    fn sequence_log_prob(&self, image: &SceneImage, tokens: &[TokenId]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::input("cannot score an empty sequence"));
        }
        let rows = self.teacher_forced(image, tokens)?;
        check_tokens(self.vocab_size(), tokens)?;
        Ok(rows.iter().zip(tokens).map(|(d, &t)| d.log_prob(t)).sum())
    }
}

fn check_tokens(vocab: usize, tokens: &[TokenId]) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(Error::input(format!("token id {t} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

impl CaptionModel for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn next_token(&self, image: &SceneImage, prefix: &[TokenId]) -> Result<TokenDistribution> {
        let pass = self.run(image, prefix)?;
        let last = pass.log_probs().row(pass.rows() - 1).to_vec();
        Ok(TokenDistribution { log_probs: last })
    }

    fn teacher_forced(&self, image: &SceneImage, tokens: &[TokenId]) -> Result<Vec<TokenDistribution>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        if tokens.len() > self.config().max_len {
            return Err(Error::Capacity(format!(
                "sequence of length {} exceeds maximum caption length {}",
                tokens.len(),
                self.config().max_len
            )));
        }
        check_tokens(self.vocab_size(), tokens)?;
        let pass = self.run(image, &tokens[..tokens.len() - 1])?;
        Ok(pass
            .log_probs()
            .rows()
            .into_iter()
            .map(|r| TokenDistribution { log_probs: r.to_vec() })
            .collect())
    }
}
