//! Model checkpoints as JSON.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! reloaded model reproduces the saved one bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::files::{read_json, write_json};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Standardizer};
use crate::tensor::Tensor;
use crate::training::TrainLog;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Final-epoch figures of the training run, without timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub final_nll: Option<f64>,
    pub final_kl: Option<f64>,
}

impl TrainSummary {
    pub fn from_log(log: &TrainLog) -> Self {
        let last = log.epochs.last();
        Self {
            epochs: log.len(),
            final_loss: last.map(|e| e.loss),
            final_nll: last.map(|e| e.nll),
            final_kl: last.map(|e| e.kl),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub standardizer: Standardizer,
    /// Keyed `layer{index}.{name}`, e.g. `layer0.w_mu`.
    pub params: BTreeMap<String, Tensor>,
    pub train_seed: u64,
    /// Default base seed for prediction noise streams.
    pub predict_seed: u64,
    pub train_summary: TrainSummary,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train_seed: u64, predict_seed: u64, log: &TrainLog) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            standardizer: model.standardizer().clone(),
            params: model
                .named_params()
                .into_iter()
                .map(|(k, t)| (k, t.clone()))
                .collect(),
            train_seed,
            predict_seed,
            train_summary: TrainSummary::from_log(log),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let mut model = Model::build(self.spec.clone())?;
        let names: Vec<String> = model.named_params().into_iter().map(|(k, _)| k).collect();
        if names.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter arrays, model expects {}",
                self.params.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let saved = self
                .params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if saved.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    saved.shape(),
                    slot.shape()
                )));
            }
            *slot = saved.clone();
        }
        model.set_standardizer(self.standardizer.clone());
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
