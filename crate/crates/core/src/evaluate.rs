//! Scores a captioner on counterfactual and factual test scenes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::captioner::{decode, top_n_captions, CaptionModel, DecodeStrategy};
use crate::error::{Error, Result};
use crate::explain::interpretability_accuracy;
use crate::metrics::{
    biased_error_rate, bleu4, chair_s, ndcg_at_k, precision_at_k, rouge_l, strip_eos, ErrorRate, RankingJudgment,
};
use crate::scenegen::{BiasSpec, SceneExample};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Candidates per counterfactual image for the ranking metrics.
    pub top_n: usize,
    /// Factual test scenes probed for interpretability; 0 skips it.
    pub interp_samples: usize,
    pub probes_per_sample: usize,
    pub interp_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_n: 5,
            interp_samples: 100,
            probes_per_sample: 1,
            interp_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::config("eval.top_n", "must be at least 1"));
        }
        if self.interp_samples > 0 && self.probes_per_sample == 0 {
            return Err(Error::config("eval.probes_per_sample", "must be at least 1"));
        }
        Ok(())
    }
}

/// Metric values keyed by name. Ranking metrics are macro-averaged over
/// counterfactual images; BLEU-4 and ROUGE-L over factual scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub chair_s: f64,
    pub p_at_5: f64,
    pub ndcg_at_5: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biased_error_rate: Option<ErrorRate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretability: Option<f64>,
    pub num_counterfactual: usize,
    pub num_factual: usize,
    /// Images with fewer than `top_n` completed candidates.
    pub padded_rankings: usize,
}

pub fn evaluate<M: CaptionModel + ?Sized>(
    model: &M,
    test: &[SceneExample],
    vocab: &Vocabulary,
    bias: Option<&BiasSpec>,
    decoding: DecodeStrategy,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    if test.is_empty() {
        return Err(Error::input("evaluation needs test scenes"));
    }
    let mut cf_captions: Vec<Vec<TokenId>> = Vec::with_capacity(test.len());
    let (mut p_sum, mut n_sum, mut padded) = (0.0, 0.0, 0);
    for ex in test {
        cf_captions.push(decode(model, &ex.cf_image, decoding, ex.scene_seed)?);
        let top = top_n_captions(model, &ex.cf_image, config.top_n)?;
        let cands: Vec<&[TokenId]> = top.captions.iter().map(|h| h.tokens.as_slice()).collect();
        let judgment = RankingJudgment::from_candidates(&cands, ex.target_tokens());
        padded += usize::from(judgment.is_padded(config.top_n));
        p_sum += precision_at_k(&judgment, config.top_n)?;
        n_sum += ndcg_at_k(&judgment, config.top_n)?;
    }
    let chair_items: Vec<(&[TokenId], &[TokenId])> = cf_captions
        .iter()
        .zip(test)
        .map(|(c, ex)| (c.as_slice(), ex.target_tokens()))
        .collect();
    let chair = chair_s(&chair_items)?;

    let (mut bleu_sum, mut rouge_sum) = (0.0, 0.0);
    for ex in test {
        let hyp = decode(model, &ex.image, decoding, ex.scene_seed)?;
        let reference = strip_eos(&ex.caption.tokens);
        bleu_sum += bleu4(strip_eos(&hyp), &[reference])?;
        rouge_sum += rouge_l(strip_eos(&hyp), reference)?;
    }

    let biased = match bias {
        Some(spec) => {
            let phrase = |name: &str| {
                vocab
                    .object_index(name)
                    .map(|o| vocab.phrase(o))
                    .ok_or_else(|| Error::config("bias", format!("unknown object `{name}`")))
            };
            let a = phrase(&spec.class_a)?;
            let b = phrase(&spec.class_b)?;
            let preds: Vec<&[TokenId]> = cf_captions.iter().map(Vec::as_slice).collect();
            let refs: Vec<&[TokenId]> = test.iter().map(|e| e.caption.tokens.as_slice()).collect();
            Some(biased_error_rate(&preds, &refs, &[a], &[b])?)
        }
        None => None,
    };

    let interpretability = if config.interp_samples > 0 {
        let samples: Vec<_> = test
            .iter()
            .take(config.interp_samples)
            .map(|e| (&e.image, &e.caption))
            .collect();
        Some(interpretability_accuracy(model, &samples, config.probes_per_sample, config.interp_seed)?.accuracy)
    } else {
        None
    };

    let n = test.len() as f64;
    Ok(MetricsReport {
        chair_s: chair,
        p_at_5: p_sum / n,
        ndcg_at_5: n_sum / n,
        bleu4: bleu_sum / n,
        rouge_l: rouge_sum / n,
        biased_error_rate: biased,
        interpretability,
        num_counterfactual: test.len(),
        num_factual: test.len(),
        padded_rankings: padded,
    })
}

/// Plain-text table with one row per method, derived from the reports.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut headers = vec!["method", "CHAIR_s", "P@5", "nDCG@5", "BLEU-4", "ROUGE-L"];
    let with_bias = rows.iter().any(|(_, r)| r.biased_error_rate.is_some());
    let with_interp = rows.iter().any(|(_, r)| r.interpretability.is_some());
    if with_bias {
        headers.push("error rate");
    }
    if with_interp {
        headers.push("interp acc");
    }
    let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
    for (name, r) in rows {
        let mut row = vec![
            name.to_string(),
            format!("{:.4}", r.chair_s),
            format!("{:.4}", r.p_at_5),
            format!("{:.4}", r.ndcg_at_5),
            format!("{:.4}", r.bleu4),
            format!("{:.4}", r.rouge_l),
        ];
        if with_bias {
            row.push(r.biased_error_rate.map_or("-".into(), |e| e.to_string()));
        }
        if with_interp {
            row.push(r.interpretability.map_or("-".into(), |a| format!("{a:.4}")));
        }
        cells.push(row);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}
