//! Hand-built reference models with known behavior, used as oracles for the
//! decoder, counterfactual construction, and region-contribution checks.

use super::distribution::{CaptionModel, TokenDistribution};
use super::types::SceneImage;
use crate::error::{Error, Result};
use crate::vocab::{cell_object, TokenId, Vocabulary, ARTICLE, CONJUNCTION, EOS};

/// Describes exactly the objects it can see.
///
/// Visible objects are those with at least one unmasked cell, listed in
/// row-major order of their first cell. The model puts `confidence` on the
/// token the caption grammar expects next and spreads the rest uniformly.
#[derive(Debug, Clone)]
pub struct OracleCopyModel {
    vocab: Vocabulary,
    max_len: usize,
    confidence: f64,
}

impl OracleCopyModel {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Self {
        OracleCopyModel {
            vocab,
            max_len,
            confidence: 0.9,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn visible_objects(image: &SceneImage) -> Vec<usize> {
        let mut seen = Vec::new();
        for &c in image.cells() {
            if let Some(o) = cell_object(c) {
                if !seen.contains(&o) {
                    seen.push(o);
                }
            }
        }
        seen
    }

    fn expected(&self, image: &SceneImage, prefix: &[TokenId]) -> TokenId {
        let visible = Self::visible_objects(image);
        let mut mentioned: Vec<usize> = Vec::new();
        let mut i = 0;
        loop {
            // Expect an article.
            if i == prefix.len() {
                return ARTICLE;
            }
            if prefix[i] != ARTICLE {
                return EOS;
            }
            i += 1;
            // Expect a phrase.
            let rest = &prefix[i..];
            let complete = self
                .vocab
                .objects
                .iter()
                .enumerate()
                .find(|(_, o)| rest.starts_with(&o.phrase));
            match complete {
                Some((obj, o)) => {
                    mentioned.push(obj);
                    i += o.phrase.len();
                }
                None => {
                    if rest.is_empty() {
                        return visible
                            .iter()
                            .find(|o| !mentioned.contains(o))
                            .map_or(EOS, |&o| self.vocab.phrase(o)[0]);
                    }
                    return self
                        .vocab
                        .objects
                        .iter()
                        .find(|o| o.phrase.len() > rest.len() && o.phrase.starts_with(rest))
                        .map_or(EOS, |o| o.phrase[rest.len()]);
                }
            }
            // Expect a conjunction or the end.
            let remaining = visible.iter().any(|o| !mentioned.contains(o));
            if i == prefix.len() {
                return if remaining { CONJUNCTION } else { EOS };
            }
            if prefix[i] != CONJUNCTION {
                return EOS;
            }
            i += 1;
        }
    }
}

impl CaptionModel for OracleCopyModel {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_token(&self, image: &SceneImage, prefix: &[TokenId]) -> Result<TokenDistribution> {
        if prefix.len() >= self.max_len {
            return Err(Error::Capacity(format!(
                "prefix of length {} reaches maximum caption length {}",
                prefix.len(),
                self.max_len
            )));
        }
        let v = self.vocab.size();
        let expected = self.expected(image, prefix) as usize;
        let other = ((1.0 - self.confidence) / (v - 1) as f64).ln();
        let mut lp = vec![other; v];
        lp[expected] = self.confidence.ln();
        TokenDistribution::from_logits(lp)
    }
}

/// Near-uniform model whose log-probabilities carry deterministic
/// pseudo-random jitter keyed on the whole input. Any change to the image
/// reshuffles every score, so region contributions behave like exchangeable
/// noise.
#[derive(Debug, Clone)]
pub struct HashNoiseModel {
    vocab_size: usize,
    max_len: usize,
    amplitude: f64,
    salt: u64,
}

impl HashNoiseModel {
    pub fn new(vocab_size: usize, max_len: usize, salt: u64) -> Self {
        HashNoiseModel {
            vocab_size,
            max_len,
            amplitude: 1.0,
            salt,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl CaptionModel for HashNoiseModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_token(&self, image: &SceneImage, prefix: &[TokenId]) -> Result<TokenDistribution> {
        let mut h = splitmix(self.salt);
        for &c in image.cells() {
            h = splitmix(h ^ u64::from(c));
        }
        h = splitmix(h ^ 0xFFFF);
        for &t in prefix {
            h = splitmix(h ^ u64::from(t));
        }
        let logits = (0..self.vocab_size)
            .map(|k| {
                let r = splitmix(h ^ (k as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
                let unit = (r >> 11) as f64 / (1u64 << 53) as f64;
                self.amplitude * (2.0 * unit - 1.0)
            })
            .collect();
        TokenDistribution::from_logits(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::decode::{decode, DecodeStrategy};

    fn vocab() -> Vocabulary {
        Vocabulary::from_objects([
            ("dog", vec!["dog"]),
            ("poodle", vec!["black", "poodle"]),
            ("tree", vec!["tree"]),
        ])
        .unwrap()
    }

    #[test]
    fn copy_model_describes_visible_objects_in_order() {
        let img = SceneImage::new(2, 2, vec![4, 0, 2, 3]).unwrap();
        let m = OracleCopyModel::new(vocab(), 20);
        let cap = decode(&m, &img, DecodeStrategy::Greedy, 0).unwrap();
        assert_eq!(vocab().render(&cap), "a tree and a dog and a black poodle .");

        let masked = img.masked(&[2]).unwrap();
        let cap = decode(&m, &masked, DecodeStrategy::Greedy, 0).unwrap();
        assert_eq!(vocab().render(&cap), "a tree and a black poodle .");
    }

    #[test]
    fn noise_model_is_deterministic_and_input_sensitive() {
        let m = HashNoiseModel::new(6, 10, 7);
        let a = SceneImage::new(1, 2, vec![0, 2]).unwrap();
        let b = SceneImage::new(1, 2, vec![1, 2]).unwrap();
        let da = m.next_token(&a, &[1]).unwrap();
        assert_eq!(da, m.next_token(&a, &[1]).unwrap());
        assert_ne!(da, m.next_token(&b, &[1]).unwrap());
        da.validate().unwrap();
    }
}
