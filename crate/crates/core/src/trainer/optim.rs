use serde::{Deserialize, Serialize};

use crate::captioner::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(crate::Error::config("train.optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: ModelParams,
        v: ModelParams,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, like: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                step: 0,
                m: ModelParams::zeros(like.config()),
                v: ModelParams::zeros(like.config()),
            },
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        match self {
            Optimizer::Sgd { lr } => params.add_scaled(grads, -*lr),
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let c1 = 1.0 - BETA1.powi(*step);
                let c2 = 1.0 - BETA2.powi(*step);
                let lr = *lr;
                let tensors = params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut());
                for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
                    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    });
                }
            }
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm after clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
        grads.global_norm()
    } else {
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::ModelConfig;

    fn params() -> ModelParams {
        let mut cfg = ModelConfig::new(5, 2, 2, 2);
        cfg.embed_dim = 4;
        cfg.attention_dim = 3;
        cfg.hidden_dim = 3;
        ModelParams::init(&cfg, 1).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = params();
        let before = p.to_flat();
        let mut g = p.clone();
        g.scale(3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &p);
        opt.step(&mut p, &g);
        for ((a, b), gv) in p.to_flat().iter().zip(&before).zip(g.to_flat()) {
            if gv.abs() > 1e-3 {
                assert!((b - a - 0.01 * gv.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = params();
        g.scale(100.0);
        let n = clip_global_norm(&mut g, 1.0);
        assert!(n <= 1.0 + 1e-12);
        let mut small = params();
        small.scale(1e-6);
        let before = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, before);
    }
}
