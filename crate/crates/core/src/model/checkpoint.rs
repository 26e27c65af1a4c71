use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::Model;
use super::params::init_params;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Generator position for resuming a seeded stream.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, TensorRecord>,
    pub rng_state: RngState,
}

impl Checkpoint {
    pub fn from_model(model: &Model, rng_state: RngState) -> Self {
        let params = model
            .params
            .named()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config.clone(),
            params,
            rng_state,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut params = init_params(&self.config, 0)?;
        let mut records = self.params;
        let mut failure = None;
        params.for_each_mut(|name, t| {
            if failure.is_some() {
                return;
            }
            match records.remove(name) {
                Some(r) if r.shape == t.shape() => match Tensor::new(r.shape, r.data) {
                    Ok(loaded) => *t = loaded,
                    Err(e) => failure = Some(Error::Compatibility(format!("{name}: {e}"))),
                },
                Some(r) => {
                    failure = Some(Error::Compatibility(format!(
                        "{name}: shape {:?}, config implies {:?}",
                        r.shape,
                        t.shape()
                    )))
                }
                None => failure = Some(Error::Compatibility(format!("missing parameter {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::Compatibility(format!("unexpected parameter {extra}")));
        }
        if !params.is_finite() {
            return Err(Error::Compatibility("non-finite parameter values".into()));
        }
        Ok(Model {
            config: self.config,
            params,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn save_model(model: &Model, rng_state: RngState, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, rng_state).save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}
