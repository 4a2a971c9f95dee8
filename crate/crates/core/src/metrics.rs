//! Hallucination and generation-quality metrics over token-id captions.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// True when `phrase` occurs contiguously in `caption`.
pub fn contains_phrase(caption: &[TokenId], phrase: &[TokenId]) -> bool {
    !phrase.is_empty() && caption.windows(phrase.len()).any(|w| w == phrase)
}

/// Fraction of captions that mention their masked phrase.
pub fn chair_s(items: &[(&[TokenId], &[TokenId])]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::input("chair_s needs at least one caption"));
    }
    let hits = items.iter().filter(|(c, p)| contains_phrase(c, p)).count();
    Ok(hits as f64 / items.len() as f64)
}

/// Candidate captions for one counterfactual image, best first, with binary
/// relevance (1 when the masked phrase is absent).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingJudgment {
    pub relevance: Vec<u8>,
}

impl RankingJudgment {
    pub fn new(relevance: Vec<u8>) -> Result<Self> {
        let j = RankingJudgment { relevance };
        j.validate()?;
        Ok(j)
    }

    /// Judges `candidates` against the masked `phrase`.
    pub fn from_candidates<C: AsRef<[TokenId]>>(candidates: &[C], phrase: &[TokenId]) -> Self {
        RankingJudgment {
            relevance: candidates
                .iter()
                .map(|c| u8::from(!contains_phrase(c.as_ref(), phrase)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.relevance.iter().find(|&&r| r > 1) {
            return Err(Error::input(format!("relevance must be 0 or 1, got {r}")));
        }
        Ok(())
    }

    /// True when fewer than `k` candidates exist; the missing ones score 0.
    pub fn is_padded(&self, k: usize) -> bool {
        self.relevance.len() < k
    }

    fn rel(&self, i: usize) -> f64 {
        self.relevance.get(i).copied().unwrap_or(0) as f64
    }
}

pub fn precision_at_k(j: &RankingJudgment, k: usize) -> Result<f64> {
    j.validate()?;
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    Ok((0..k).map(|i| j.rel(i)).sum::<f64>() / k as f64)
}

/// nDCG with gain equal to relevance and discount `1 / log2(rank + 1)`;
/// 0 when no candidate is relevant.
pub fn ndcg_at_k(j: &RankingJudgment, k: usize) -> Result<f64> {
    j.validate()?;
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = (0..k).map(|i| j.rel(i) * discount(i)).sum();
    let positives = j.relevance.iter().take(k).filter(|&&r| r == 1).count();
    let ideal: f64 = (0..positives).map(discount).sum();
    Ok(if ideal == 0.0 { 0.0 } else { dcg / ideal })
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

const BLEU_EPSILON: f64 = 1e-9;

/// Sentence BLEU-4: uniform weights, clipped counts, brevity penalty against
/// the closest reference length, zero match counts replaced by 1e-9.
pub fn bleu4(hypothesis: &[TokenId], references: &[&[TokenId]]) -> Result<f64> {
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::input("BLEU needs non-empty references"));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut max_ref: HashMap<&[TokenId], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let matched = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 };
        log_sum += (matched / total as f64).ln();
    }
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(hypothesis: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::input("ROUGE-L needs a non-empty reference"));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Share of class-B references whose prediction uses a class-A word.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub rate: f64,
    pub errors: usize,
    pub total: usize,
}

impl ErrorRate {
    pub fn from_counts(errors: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::input("no class-B references"));
        }
        if errors > total {
            return Err(Error::input("more errors than samples"));
        }
        Ok(ErrorRate {
            rate: errors as f64 / total as f64,
            errors,
            total,
        })
    }
}

impl fmt::Display for ErrorRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}% ({})", self.rate * 100.0, self.errors)
    }
}

/// Class-B references are those containing a class-B phrase; an error is a
/// prediction containing any class-A phrase.
pub fn biased_error_rate(
    predictions: &[&[TokenId]],
    references: &[&[TokenId]],
    class_a: &[&[TokenId]],
    class_b: &[&[TokenId]],
) -> Result<ErrorRate> {
    if predictions.len() != references.len() {
        return Err(Error::input(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let mut total = 0;
    let mut errors = 0;
    for (p, r) in predictions.iter().zip(references) {
        if class_b.iter().any(|w| contains_phrase(r, w)) {
            total += 1;
            if class_a.iter().any(|w| contains_phrase(p, w)) {
                errors += 1;
            }
        }
    }
    ErrorRate::from_counts(errors, total)
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::input("spearman needs two equal-length series of at least 2 points"));
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Strips a trailing end-of-sequence token.
pub fn strip_eos(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.split_last() {
        Some((&crate::vocab::EOS, rest)) => rest,
        _ => tokens,
    }
}
