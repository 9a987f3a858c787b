//! JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ame::{build_ame, AmeModel};
use super::config::AmeConfig;
use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "ame-model/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub seed: u64,
    pub config: AmeConfig,
    pub params: Vec<NamedTensor>,
}

impl AmeModel {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            seed: self.config().seed,
            config: self.config().clone(),
            params: self
                .params()
                .named()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    /// Rebuilds the architecture from the stored config and overwrites every
    /// parameter by name.
    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::Config(format!("unsupported model format `{}`", file.format)));
        }
        let mut config = file.config;
        config.seed = file.seed;
        let mut model = build_ame(config)?;
        if file.params.len() != model.params().len() {
            return Err(Error::Config(format!(
                "model file has {} parameters, architecture needs {}",
                file.params.len(),
                model.params().len()
            )));
        }
        for p in file.params {
            let id = model
                .params()
                .find(&p.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", p.name)))?;
            let expected = model.params().value(id).shape().to_vec();
            if expected != p.shape {
                return Err(Error::Dimension(format!(
                    "parameter `{}` has shape {:?}, architecture needs {expected:?}",
                    p.name, p.shape
                )));
            }
            *model.params_mut().value_mut(id) = Tensor::new(p.shape, p.data)?;
        }
        Ok(model)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(json)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Short content hash of the serialized model.
    pub fn model_hash(&self) -> Result<String> {
        Ok(short_hash(self.to_json()?.as_bytes()))
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
