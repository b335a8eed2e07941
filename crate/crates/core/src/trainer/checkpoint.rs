use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::{ParamStore, ParamTensor};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: ParamStore,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    data: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    config: serde_json::Value,
    params: BTreeMap<String, TensorFile>,
    loss_trace: Vec<f64>,
}

impl Checkpoint {
    /// JSON with every object's keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            version: self.version,
            config: serde_json::to_value(&self.config)?,
            params: self
                .params
                .sorted()
                .map(|t| {
                    (
                        t.name.clone(),
                        TensorFile {
                            data: t.values.clone(),
                            shape: t.shape.clone(),
                        },
                    )
                })
                .collect(),
            loss_trace: self.loss_trace.clone(),
        };
        Ok(serde_json::to_string(&serde_json::to_value(file)?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let config: TrainConfig = serde_json::from_value(file.config)
            .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
        let mut loaded = ParamStore::new();
        for (name, t) in file.params {
            loaded.insert(ParamTensor::new(name, t.shape, t.data)?)?;
        }
        let model = Model::from_params(config.model_config(), loaded)?;
        Ok(Self {
            version: file.version,
            config,
            params: model.params,
            loss_trace: file.loss_trace,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, ckpt.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
