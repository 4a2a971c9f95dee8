use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::captioner::{Checkpoint, CounterfactualSample, ModelConfig, ModelParams, SceneImage, Stage};
use crate::causal::{aggregate_loss, nll_with_grad, regularizer, regularizer_with_grad, RegularizationConfig};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 15,
            seed: 0,
            clip_norm: 1.0,
            optimizer: OptimizerKind::Adam,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 2,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", format!("must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", format!("must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// One optimizer step. Losses are sums over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub reg: f64,
    pub aggregate: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRecord>,
    /// Mean per-sample aggregate loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("trace serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("trace", e)))
        .collect()
}

struct StepLoss {
    nll: f64,
    reg: f64,
    aggregate: f64,
}

/// Shuffled mini-batch loop shared by every stage. `sample_loss` adds the
/// gradient of sample `i` into its accumulator and returns its losses.
fn optimize<F>(params: &mut ModelParams, n: usize, config: &TrainConfig, mut sample_loss: F) -> Result<(Vec<TraceRecord>, Vec<f64>)>
where
    F: FnMut(&ModelParams, usize, &mut ModelParams) -> Result<StepLoss>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::input("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = ModelParams::zeros(params.config());
            let mut sum = StepLoss {
                nll: 0.0,
                reg: 0.0,
                aggregate: 0.0,
            };
            for &i in batch {
                let l = sample_loss(params, i, &mut grads)?;
                sum.nll += l.nll;
                sum.reg += l.reg;
                sum.aggregate += l.aggregate;
            }
            let step = trace.len();
            if !sum.aggregate.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, step {step} (nll {}, reg {})",
                    sum.nll, sum.reg
                )));
            }
            let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
            opt.step(params, &grads);
            if !params.all_finite() {
                return Err(Error::Divergence(format!("non-finite parameters after step {step}")));
            }
            epoch_total += sum.aggregate;
            trace.push(TraceRecord {
                step,
                epoch,
                nll: sum.nll,
                reg: sum.reg,
                aggregate: sum.aggregate,
                grad_norm,
            });
        }
        log::debug!("epoch {epoch}: mean loss {:.5}", epoch_total / n as f64);
        epoch_losses.push(epoch_total / n as f64);
    }
    Ok((trace, epoch_losses))
}

/// Vanilla NLL training from `start` on `(image, caption)` pairs.
pub fn continue_nll(
    start: &ModelParams,
    data: &[(&SceneImage, &[TokenId])],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<TraceRecord>, Vec<f64>)> {
    let mut params = start.clone();
    let (trace, epochs) = optimize(&mut params, data.len(), config, |p, i, g| {
        let (image, tokens) = data[i];
        let nll = nll_with_grad(p, image, tokens, 1.0, g)?;
        Ok(StepLoss {
            nll,
            reg: 0.0,
            aggregate: nll,
        })
    })?;
    Ok((params, trace, epochs))
}

/// Stage 1: NLL training from a seeded initialization.
pub fn train_stage1(model: &ModelConfig, data: &[(&SceneImage, &[TokenId])], config: &TrainConfig) -> Result<TrainOutcome> {
    let init = ModelParams::init(model, config.seed)?;
    let (params, trace, epoch_losses) = continue_nll(&init, data, config)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::stage1(params),
        trace,
        epoch_losses,
    })
}

/// Stage 2: `alpha * NLL + (1 - alpha) * regularizer` on every
/// counterfactual sample, the NLL coming from its factual half.
pub fn train_stage2(
    stage1: &Checkpoint,
    samples: &[CounterfactualSample],
    config: &TrainConfig,
    reg: &RegularizationConfig,
) -> Result<TrainOutcome> {
    if stage1.stage != Stage::Stage1 {
        return Err(Error::input("stage 2 must start from a stage-1 checkpoint"));
    }
    reg.validate()?;
    for s in samples {
        s.validate()?;
    }
    let mut params = stage1.params.clone();
    let (trace, epoch_losses) = optimize(&mut params, samples.len(), config, |p, i, g| {
        let s = &samples[i];
        let nll = nll_with_grad(p, &s.factual_image, &s.factual_caption.tokens, reg.alpha, g)?;
        let r = if reg.alpha == 1.0 {
            regularizer(p, s, reg.variant, reg.log_prob_floor)?
        } else {
            regularizer_with_grad(p, s, reg.variant, reg.log_prob_floor, 1.0 - reg.alpha, g)?
        };
        Ok(StepLoss {
            nll,
            reg: r,
            aggregate: aggregate_loss(nll, r, reg)?,
        })
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Stage2,
            variant: Some(reg.variant),
            alpha: Some(reg.alpha),
            provenance: stage1.provenance.clone(),
            params,
        },
        trace,
        epoch_losses,
    })
}
