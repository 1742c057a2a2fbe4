//! Model weights plus everything needed to resume training bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use freeu_core::optim::{Adam, AdamConfig};
use freeu_core::rng::{RngState, SeededRng};
use freeu_core::tensor::Tensor;
use freeu_core::unet::UNetModel;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::container;
use crate::error::{LabError, Result};

const WEIGHT: &str = "weight/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    /// Optimizer steps completed.
    pub step: u64,
    /// Position of the training stream after `step` steps.
    pub rng: RngState,
    pub adam: AdamConfig,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    config: RunConfig,
    training: TrainingState,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: UNetModel,
    pub step: u64,
    pub rng: SeededRng,
    pub adam: Adam,
}

impl Checkpoint {
    /// Freshly initialised weights and optimizer for `config`.
    pub fn initial(config: &RunConfig) -> Result<Self> {
        config.check()?;
        let model = UNetModel::new(config.unet.clone(), config.train.seed)?;
        Ok(Self {
            config: config.clone(),
            model,
            step: 0,
            rng: SeededRng::new(config.train.seed, 1),
            adam: Adam::new(AdamConfig {
                lr: config.train.lr,
                ..AdamConfig::default()
            }),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            config: self.config.clone(),
            training: TrainingState {
                step: self.step,
                rng: self.rng.state(),
                adam: self.adam.config.clone(),
                adam_step: self.adam.step,
            },
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in self.model.weights() {
            tensors.push((format!("{WEIGHT}{k}"), v.clone()));
        }
        for (k, v) in &self.adam.m {
            tensors.push((format!("{ADAM_M}{k}"), v.clone()));
        }
        for (k, v) in &self.adam.v {
            tensors.push((format!("{ADAM_V}{k}"), v.clone()));
        }
        container::encode(&meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = container::decode::<CheckpointMeta>(bytes)?;
        let meta = header.meta;
        if meta.kind != "checkpoint" {
            return Err(LabError::Container(format!("expected a checkpoint, found {:?}", meta.kind)));
        }
        meta.config.check()?;
        let mut weights = BTreeMap::new();
        let mut adam = Adam::new(meta.training.adam.clone());
        adam.step = meta.training.adam_step;
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix(WEIGHT) {
                weights.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ADAM_M) {
                adam.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                adam.v.insert(k.to_string(), t);
            } else {
                return Err(LabError::Container(format!("unexpected tensor {name}")));
            }
        }
        let model = UNetModel::from_weights(meta.config.unet.clone(), weights)?;
        let rng = SeededRng::from_state(&meta.training.rng)
            .ok_or_else(|| LabError::Container("bad rng state".into()))?;
        Ok(Self {
            config: meta.config,
            model,
            step: meta.training.step,
            rng,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LabError::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
