//! Training objectives and effect estimators.
//!
//! Three query patterns recur below, each a teacher-forced pass:
//!
//! * factual: image `I`, reference caption `S`;
//! * counterfactual: masked image `I*`, stage-1 caption `S*` generated for `I*`;
//! * mixed: image `I` under the counterfactual prefixes `S*`.
//!
//! The NLL loss scores `S` under `I`. The total-effect loss contrasts the
//! entity tokens at their factual positions against their average
//! log-probability over every prefix of `S*` under `I*`. The natural-direct-
//! effect loss holds the prefixes at `S*` and only switches the image.
//! Losses work in log space and floor counterfactual-image log-probabilities;
//! effect estimates work in probability space.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::captioner::{CaptionModel, CounterfactualSample, ModelParams, SceneImage};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// `ln(1e-8)`.
pub const DEFAULT_LOG_PROB_FLOOR: f64 = -18.420_680_743_952_367;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Te,
    Nde,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Te => "te",
            Variant::Nde => "nde",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "te" => Ok(Variant::Te),
            "nde" => Ok(Variant::Nde),
            other => Err(Error::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationConfig {
    pub alpha: f64,
    pub variant: Variant,
    #[serde(default = "default_floor")]
    pub log_prob_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_LOG_PROB_FLOOR
}

impl RegularizationConfig {
    pub fn new(alpha: f64, variant: Variant) -> Self {
        RegularizationConfig {
            alpha,
            variant,
            log_prob_floor: DEFAULT_LOG_PROB_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.log_prob_floor < 0.0) {
            return Err(Error::config(
                "log_prob_floor",
                format!("must be negative, got {}", self.log_prob_floor),
            ));
        }
        Ok(())
    }
}

/// `alpha * nll + (1 - alpha) * reg`; exactly `nll` at `alpha = 1`.
pub fn aggregate_loss(nll: f64, reg: f64, config: &RegularizationConfig) -> Result<f64> {
    config.validate()?;
    if config.alpha == 1.0 {
        return Ok(nll);
    }
    if config.alpha == 0.0 {
        return Ok(reg);
    }
    Ok(config.alpha * nll + (1.0 - config.alpha) * reg)
}

fn rows_of<M: CaptionModel + ?Sized>(model: &M, image: &SceneImage, tokens: &[TokenId]) -> Result<Array2<f64>> {
    let rows = model.teacher_forced(image, tokens)?;
    let v = model.vocab_size();
    let mut out = Array2::zeros((rows.len(), v));
    for (i, d) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(d.log_probs()));
    }
    Ok(out)
}

fn check_sample(sample: &CounterfactualSample) -> Result<()> {
    sample.validate()?;
    let span = sample.target();
    if span.start + span.len > sample.factual_caption.tokens.len() {
        return Err(Error::input("target span runs past the factual caption"));
    }
    Ok(())
}

/// NLL of one caption, with its gradient with respect to the rows.
fn nll_rows(rows: &Array2<f64>, tokens: &[TokenId]) -> (f64, Array2<f64>) {
    let mut d = Array2::zeros(rows.dim());
    let mut loss = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        loss -= rows[[t, tok as usize]];
        d[[t, tok as usize]] = -1.0;
    }
    (loss, d)
}

/// Mean floored log-probability of `token` over every row, plus the
/// per-row gradient contribution `1/L` where the floor is inactive.
fn floored_mean(rows: &Array2<f64>, token: TokenId, floor: f64, sign: f64, d: &mut Array2<f64>) -> f64 {
    let l = rows.nrows() as f64;
    let mut total = 0.0;
    for i in 0..rows.nrows() {
        let lp = rows[[i, token as usize]];
        if lp < floor {
            total += floor;
        } else {
            total += lp;
            d[[i, token as usize]] += sign / l;
        }
    }
    total / l
}

fn plain_mean(rows: &Array2<f64>, token: TokenId, sign: f64, d: &mut Array2<f64>) -> f64 {
    let l = rows.nrows() as f64;
    let mut total = 0.0;
    for i in 0..rows.nrows() {
        total += rows[[i, token as usize]];
        d[[i, token as usize]] += sign / l;
    }
    total / l
}

/// TE loss from factual rows (`I`, `S`) and counterfactual rows (`I*`, `S*`).
fn te_rows(
    factual: &Array2<f64>,
    counterfactual: &Array2<f64>,
    start: usize,
    entity: &[TokenId],
    floor: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let mut d_f = Array2::zeros(factual.dim());
    let mut d_cf = Array2::zeros(counterfactual.dim());
    let mut loss = 0.0;
    for (j, &tok) in entity.iter().enumerate() {
        let factual_lp = factual[[start + j, tok as usize]];
        d_f[[start + j, tok as usize]] -= 1.0;
        let cf_mean = floored_mean(counterfactual, tok, floor, 1.0, &mut d_cf);
        loss -= factual_lp - cf_mean;
    }
    (loss, d_f, d_cf)
}

/// NDE loss from mixed rows (`I`, `S*`) and counterfactual rows (`I*`, `S*`).
fn nde_rows(
    mixed: &Array2<f64>,
    counterfactual: &Array2<f64>,
    entity: &[TokenId],
    floor: f64,
) -> (f64, Array2<f64>, Array2<f64>) {
    let mut d_m = Array2::zeros(mixed.dim());
    let mut d_cf = Array2::zeros(counterfactual.dim());
    let mut loss = 0.0;
    for &tok in entity {
        let mixed_mean = plain_mean(mixed, tok, -1.0, &mut d_m);
        let cf_mean = floored_mean(counterfactual, tok, floor, 1.0, &mut d_cf);
        loss -= mixed_mean - cf_mean;
    }
    (loss, d_m, d_cf)
}

/// Summed negative log-likelihood of every caption in the batch.
pub fn nll_loss<M: CaptionModel + ?Sized>(model: &M, batch: &[(&SceneImage, &[TokenId])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("nll_loss needs a non-empty batch"));
    }
    let mut total = 0.0;
    for (image, tokens) in batch {
        if tokens.is_empty() {
            return Err(Error::input("cannot score an empty caption"));
        }
        total += nll_rows(&rows_of(model, image, tokens)?, tokens).0;
    }
    Ok(total)
}

pub fn te_loss<M: CaptionModel + ?Sized>(model: &M, sample: &CounterfactualSample, floor: f64) -> Result<f64> {
    check_sample(sample)?;
    let factual = rows_of(model, &sample.factual_image, &sample.factual_caption.tokens)?;
    let cf = rows_of(model, &sample.cf_image, &sample.cf_caption)?;
    Ok(te_rows(&factual, &cf, sample.target().start, sample.target_tokens(), floor).0)
}

pub fn nde_loss<M: CaptionModel + ?Sized>(model: &M, sample: &CounterfactualSample, floor: f64) -> Result<f64> {
    check_sample(sample)?;
    let mixed = rows_of(model, &sample.factual_image, &sample.cf_caption)?;
    let cf = rows_of(model, &sample.cf_image, &sample.cf_caption)?;
    Ok(nde_rows(&mixed, &cf, sample.target_tokens(), floor).0)
}

pub fn regularizer<M: CaptionModel + ?Sized>(
    model: &M,
    sample: &CounterfactualSample,
    variant: Variant,
    floor: f64,
) -> Result<f64> {
    match variant {
        Variant::Te => te_loss(model, sample, floor),
        Variant::Nde => nde_loss(model, sample, floor),
    }
}

/// NLL of `tokens` under `image`, accumulating `weight * gradient` into `grads`.
pub fn nll_with_grad(
    params: &ModelParams,
    image: &SceneImage,
    tokens: &[TokenId],
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::input("cannot score an empty caption"));
    }
    let pass = params.run(image, &tokens[..tokens.len() - 1])?;
    for &t in tokens {
        params.check_token(t)?;
    }
    let (loss, mut d) = nll_rows(pass.log_probs(), tokens);
    if weight != 1.0 {
        d.mapv_inplace(|v| v * weight);
    }
    params.backward(&pass, &d, grads);
    Ok(loss)
}

/// Regularizer value for one sample, accumulating `weight * gradient` into
/// `grads`. Gradients flow through both terms.
pub fn regularizer_with_grad(
    params: &ModelParams,
    sample: &CounterfactualSample,
    variant: Variant,
    floor: f64,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    check_sample(sample)?;
    let entity = sample.target_tokens();
    for &t in entity.iter().chain(&sample.cf_caption) {
        params.check_token(t)?;
    }
    let cf_caption = &sample.cf_caption;
    let cf_pass = params.run(&sample.cf_image, &cf_caption[..cf_caption.len() - 1])?;
    let (loss, first_pass, d_first, d_cf) = match variant {
        Variant::Te => {
            let tokens = &sample.factual_caption.tokens;
            let pass = params.run(&sample.factual_image, &tokens[..tokens.len() - 1])?;
            let (loss, d_f, d_cf) = te_rows(pass.log_probs(), cf_pass.log_probs(), sample.target().start, entity, floor);
            (loss, pass, d_f, d_cf)
        }
        Variant::Nde => {
            let pass = params.run(&sample.factual_image, &cf_caption[..cf_caption.len() - 1])?;
            let (loss, d_m, d_cf) = nde_rows(pass.log_probs(), cf_pass.log_probs(), entity, floor);
            (loss, pass, d_m, d_cf)
        }
    };
    params.backward(&first_pass, &(d_first * weight), grads);
    params.backward(&cf_pass, &(d_cf * weight), grads);
    Ok(loss)
}

pub fn te_loss_with_grad(params: &ModelParams, sample: &CounterfactualSample, floor: f64) -> Result<(f64, ModelParams)> {
    let mut grads = ModelParams::zeros(params.config());
    let loss = regularizer_with_grad(params, sample, Variant::Te, floor, 1.0, &mut grads)?;
    Ok((loss, grads))
}

pub fn nde_loss_with_grad(params: &ModelParams, sample: &CounterfactualSample, floor: f64) -> Result<(f64, ModelParams)> {
    let mut grads = ModelParams::zeros(params.config());
    let loss = regularizer_with_grad(params, sample, Variant::Nde, floor, 1.0, &mut grads)?;
    Ok((loss, grads))
}

pub fn nll_loss_with_grad(params: &ModelParams, batch: &[(&SceneImage, &[TokenId])]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::input("nll_loss needs a non-empty batch"));
    }
    let mut grads = ModelParams::zeros(params.config());
    let mut total = 0.0;
    for (image, tokens) in batch {
        total += nll_with_grad(params, image, tokens, 1.0, &mut grads)?;
    }
    Ok((total, grads))
}

/// Diagnostic effects of the image intervention on one token, in
/// probability space. `tie` is always computed as `te - nde`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub te: f64,
    pub nde: f64,
    pub tie: f64,
    pub target_token: TokenId,
}

impl EffectEstimate {
    pub fn from_outcomes(target_token: TokenId, factual: f64, mixed: f64, counterfactual: f64) -> Self {
        let te = factual - counterfactual;
        let nde = mixed - counterfactual;
        EffectEstimate {
            te,
            nde,
            tie: te - nde,
            target_token,
        }
    }
}

/// Where the factual outcome `Y(I, M_I)` is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// The token's position inside the target span of the factual caption.
    #[default]
    FactualPosition,
    /// Average over every prefix of the factual caption, matching the
    /// convention used for the counterfactual outcomes.
    AverageOverPrefixes,
}

fn mean_prob(rows: &Array2<f64>, token: TokenId) -> f64 {
    rows.column(token as usize).iter().map(|v| v.exp()).sum::<f64>() / rows.nrows() as f64
}

pub fn estimate_effects<M: CaptionModel + ?Sized>(
    model: &M,
    sample: &CounterfactualSample,
    target_token: TokenId,
    policy: PositionPolicy,
) -> Result<EffectEstimate> {
    check_sample(sample)?;
    if target_token as usize >= model.vocab_size() {
        return Err(Error::input(format!("target token {target_token} outside vocabulary")));
    }
    let tokens = &sample.factual_caption.tokens;
    let factual_rows = rows_of(model, &sample.factual_image, tokens)?;
    let factual = match policy {
        PositionPolicy::FactualPosition => {
            let span = sample.target();
            let pos = span
                .range()
                .find(|&i| tokens[i] == target_token)
                .or_else(|| tokens.iter().position(|&t| t == target_token))
                .ok_or_else(|| Error::input(format!("token {target_token} does not occur in the factual caption")))?;
            factual_rows[[pos, target_token as usize]].exp()
        }
        PositionPolicy::AverageOverPrefixes => mean_prob(&factual_rows, target_token),
    };
    let mixed = mean_prob(&rows_of(model, &sample.factual_image, &sample.cf_caption)?, target_token);
    let cf = mean_prob(&rows_of(model, &sample.cf_image, &sample.cf_caption)?, target_token);
    Ok(EffectEstimate::from_outcomes(target_token, factual, mixed, cf))
}
