//! Self-describing checkpoint container: versioned header, model config,
//! training-stage tag, and every parameter array under its canonical name.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::causal::Variant;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "causalcap-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub variant: Option<Variant>,
    pub alpha: Option<f64>,
    /// Hash of the inputs that produced this checkpoint, used for caching.
    pub provenance: Option<String>,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    stage: Stage,
    variant: Option<Variant>,
    alpha: Option<f64>,
    provenance: Option<String>,
    model_config: ModelConfig,
    params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn stage1(params: ModelParams) -> Self {
        Checkpoint {
            stage: Stage::Stage1,
            variant: None,
            alpha: None,
            provenance: None,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            variant: self.variant,
            alpha: self.alpha,
            provenance: self.provenance.clone(),
            model_config: self.params.config().clone(),
            params: self
                .params
                .tensors()
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                "checkpoint",
                format!("unknown format tag `{}`", file.format),
            ));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {}", file.version),
            ));
        }
        file.model_config.validate()?;
        let mut params = ModelParams::zeros(&file.model_config);
        if file.params.len() != PARAM_NAMES.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", PARAM_NAMES.len(), file.params.len()),
            ));
        }
        for tensor in file.params {
            let slot = params
                .tensors_mut()
                .into_iter()
                .find(|(name, _)| *name == tensor.name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor `{}`", tensor.name)))?;
            if slot.dim() != (tensor.shape[0], tensor.shape[1]) {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor `{}` has shape {:?}, expected {:?}", tensor.name, tensor.shape, slot.dim()),
                ));
            }
            *slot = Array2::from_shape_vec((tensor.shape[0], tensor.shape[1]), tensor.data)
                .map_err(|e| Error::format("checkpoint", e))?;
        }
        Ok(Checkpoint {
            stage: file.stage,
            variant: file.variant,
            alpha: file.alpha,
            provenance: file.provenance,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
