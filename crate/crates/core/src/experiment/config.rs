use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{DecodeStrategy, ModelConfig};
use crate::causal::{RegularizationConfig, Variant, DEFAULT_LOG_PROB_FLOOR};
use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::scenegen::{BiasSpec, World, WorldConfig};
use crate::trainer::TrainConfig;

/// Architecture sizes; vocabulary and grid come from the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub attention_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1, 1);
        ModelSection {
            embed_dim: m.embed_dim,
            num_heads: m.num_heads,
            attention_dim: m.attention_dim,
            hidden_dim: m.hidden_dim,
            max_len: m.max_len,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, world: &World) -> ModelConfig {
        ModelConfig {
            vocab_size: world.vocab.size(),
            num_objects: world.vocab.num_objects(),
            grid_height: world.config.grid_height,
            grid_width: world.config.grid_width,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            attention_dim: self.attention_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationSection {
    pub alpha: f64,
    #[serde(default = "floor")]
    pub log_prob_floor: f64,
}

fn floor() -> f64 {
    DEFAULT_LOG_PROB_FLOOR
}

/// Everything one experiment needs; stored as `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub bias: Option<BiasSpec>,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    pub regularization: RegularizationSection,
    #[serde(default)]
    pub decode: DecodeStrategy,
    #[serde(default)]
    pub eval: EvalConfig,
}

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_STAGE1_EPOCHS: usize = 12;
pub const DEFAULT_STAGE2_LR: f64 = 3e-4;

impl ExperimentConfig {
    /// Shortcut world with `river` pulling in `man` at 0.9, every seed set
    /// to `seed`.
    pub fn shortcut(seed: u64) -> Self {
        let mut world = WorldConfig::shortcut(0.9, 2000, seed);
        world.splits.test = 500;
        let mut stage1 = TrainConfig::stage1();
        stage1.seed = seed;
        stage1.epochs = DEFAULT_STAGE1_EPOCHS;
        let mut stage2 = TrainConfig::stage2();
        stage2.seed = seed;
        stage2.learning_rate = DEFAULT_STAGE2_LR;
        ExperimentConfig {
            world,
            bias: None,
            model: ModelSection::default(),
            train: TrainSection { stage1, stage2 },
            regularization: RegularizationSection {
                alpha: DEFAULT_ALPHA,
                log_prob_floor: DEFAULT_LOG_PROB_FLOOR,
            },
            decode: DecodeStrategy::default(),
            eval: EvalConfig::default(),
        }
    }

    /// `man` and `woman` at 5:1 in training and 1:5 at test, no planted
    /// co-occurrence.
    pub fn biased(seed: u64) -> Self {
        let mut cfg = Self::shortcut(seed);
        cfg.world.co_occurrence.clear();
        let mut bias = BiasSpec::new("man", "woman", [5, 1], 1200, 300);
        bias.train_other = 600;
        cfg.bias = Some(bias);
        cfg.eval.interp_samples = 0;
        cfg
    }

    pub fn validate(&self) -> Result<World> {
        let world = World::new(self.world.clone())?;
        if let Some(b) = &self.bias {
            b.validate(&world)?;
        }
        self.model.model_config(&world).validate()?;
        in_section(self.train.stage1.validate(), "train.", "train.stage1.")?;
        in_section(self.train.stage2.validate(), "train.", "train.stage2.")?;
        in_section(self.regularization_config(Variant::Te).validate(), "", "regularization.")?;
        self.decode.validate()?;
        self.eval.validate()?;
        Ok(world)
    }

    pub fn regularization_config(&self, variant: Variant) -> RegularizationConfig {
        RegularizationConfig {
            alpha: self.regularization.alpha,
            variant,
            log_prob_floor: self.regularization.log_prob_floor,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = field_from_toml_error(text, &e).unwrap_or_else(|| "config".to_string());
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of everything that determines the stage-1 checkpoint.
    pub fn stage1_provenance(&self) -> String {
        let key = serde_json::json!({
            "world": self.world,
            "bias": self.bias,
            "model": self.model,
            "stage1": self.train.stage1,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

fn in_section(r: Result<()>, from: &str, to: &str) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{to}{}", field.strip_prefix(from).unwrap_or(&field)),
            message,
        },
        other => other,
    })
}

/// Best-effort dotted path of the key a TOML error points at.
fn field_from_toml_error(text: &str, e: &toml::de::Error) -> Option<String> {
    let span = e.span()?;
    let before = &text[..span.start];
    let section = before
        .lines()
        .rev()
        .find_map(|l| {
            let t = l.trim();
            t.strip_prefix('[').map(|s| s.trim_matches(|c| c == '[' || c == ']').to_string())
        });
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next().map(str::trim).filter(|k| !k.is_empty() && !k.starts_with('['));
    match (section, key) {
        (Some(s), Some(k)) => Some(format!("{s}.{k}")),
        (None, Some(k)) => Some(k.to_string()),
        (Some(s), None) => Some(s),
        (None, None) => None,
    }
}
