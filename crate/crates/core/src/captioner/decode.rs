//! Caption decoding: beam search, greedy, top-K, nucleus, and plain
//! ancestral sampling.
//!
//! Beam scores are raw sums of log-probabilities with no length
//! normalization. Completed hypotheses stay in the beam pool and compete with
//! live ones. All ties break lexicographically by token id.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distribution::{CaptionModel, TokenDistribution};
use super::types::SceneImage;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS};

pub const DEFAULT_BEAM_WIDTH: usize = 5;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_NUCLEUS_P: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
    TopK { k: usize },
    Nucleus { p: f64 },
    /// Sampling from the full distribution.
    Ancestral,
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        DecodeStrategy::Beam {
            width: DEFAULT_BEAM_WIDTH,
        }
    }
}

impl DecodeStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodeStrategy::Beam { width: 0 } => {
                Err(Error::config("decode.width", "beam width must be at least 1"))
            }
            DecodeStrategy::TopK { k: 0 } => {
                Err(Error::config("decode.k", "top-K needs K of at least 1"))
            }
            DecodeStrategy::Nucleus { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::config("decode.p", format!("nucleus p must lie in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, DecodeStrategy::Greedy | DecodeStrategy::Beam { .. })
    }
}

/// A scored caption hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

impl Hypothesis {
    fn is_complete(&self, max_len: usize) -> bool {
        self.tokens.last() == Some(&EOS) || self.tokens.len() >= max_len
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Decodes one caption. `seed` only matters for the sampling strategies.
pub fn decode<M: CaptionModel + ?Sized>(
    model: &M,
    image: &SceneImage,
    strategy: DecodeStrategy,
    seed: u64,
) -> Result<Vec<TokenId>> {
    strategy.validate()?;
    match strategy {
        DecodeStrategy::Greedy => greedy(model, image),
        DecodeStrategy::Beam { width } => Ok(beam_search(model, image, width)?.remove(0).tokens),
        _ => sample(model, image, strategy, seed),
    }
}

fn greedy<M: CaptionModel + ?Sized>(model: &M, image: &SceneImage) -> Result<Vec<TokenId>> {
    let mut tokens = Vec::new();
    while tokens.len() < model.max_len() {
        let next = model.next_token(image, &tokens)?.argmax();
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(tokens)
}

/// Runs beam search and returns the final pool, best first. Every entry is a
/// completed hypothesis.
pub fn beam_search<M: CaptionModel + ?Sized>(
    model: &M,
    image: &SceneImage,
    width: usize,
) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::config("decode.width", "beam width must be at least 1"));
    }
    let max_len = model.max_len();
    let mut pool = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    while pool.iter().any(|h| !h.is_complete(max_len)) {
        let mut candidates = Vec::with_capacity(pool.len() * model.vocab_size());
        for hyp in pool {
            if hyp.is_complete(max_len) {
                candidates.push(hyp);
                continue;
            }
            let dist = model.next_token(image, &hyp.tokens)?;
            for (tok, &lp) in dist.log_probs().iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok as TokenId);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        pool = candidates;
    }
    Ok(pool)
}

/// The `n` best captions from a beam of width `max(n, 5)`, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopCaptions {
    pub captions: Vec<Hypothesis>,
    /// Set when fewer than `n` completed hypotheses were available.
    pub truncated: bool,
}

pub fn top_n_captions<M: CaptionModel + ?Sized>(
    model: &M,
    image: &SceneImage,
    n: usize,
) -> Result<TopCaptions> {
    if n == 0 {
        return Err(Error::input("top-n needs n of at least 1"));
    }
    let mut pool = beam_search(model, image, n.max(DEFAULT_BEAM_WIDTH))?;
    let truncated = pool.len() < n;
    if truncated {
        log::warn!("only {} completed hypotheses for top-{n}", pool.len());
    }
    pool.truncate(n);
    Ok(TopCaptions {
        captions: pool,
        truncated,
    })
}

fn sample<M: CaptionModel + ?Sized>(
    model: &M,
    image: &SceneImage,
    strategy: DecodeStrategy,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    while tokens.len() < model.max_len() {
        let dist = model.next_token(image, &tokens)?;
        let next = sample_step(&dist, strategy, &mut rng);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(tokens)
}

/// Draws one token. Candidates are walked in descending probability (ties by
/// id) after truncation, so strategies that keep the full support consume
/// the random stream identically.
pub(crate) fn sample_step<R: Rng>(dist: &TokenDistribution, strategy: DecodeStrategy, rng: &mut R) -> TokenId {
    let mut order: Vec<(TokenId, f64)> = dist
        .probs()
        .into_iter()
        .enumerate()
        .map(|(i, p)| (i as TokenId, p))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = match strategy {
        DecodeStrategy::TopK { k } => k.min(order.len()),
        DecodeStrategy::Nucleus { p } if p < 1.0 => {
            let mut cum = 0.0;
            let mut keep = order.len();
            for (i, &(_, prob)) in order.iter().enumerate() {
                cum += prob;
                if cum >= p {
                    keep = i + 1;
                    break;
                }
            }
            keep
        }
        _ => order.len(),
    };
    order.truncate(keep);
    let total: f64 = order.iter().map(|&(_, p)| p).sum();
    let u = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for &(tok, p) in &order {
        cum += p;
        if u < cum {
            return tok;
        }
    }
    order.last().map(|&(t, _)| t).unwrap_or(EOS)
}
