//! Self-describing model checkpoints.
//!
//! A checkpoint is a JSON document holding the architecture, every parameter
//! tensor under its canonical name, and the training metadata. Floats are
//! written with round-trip precision, so a loaded model reproduces the saved
//! model's predictions bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MilModel, ModelSpec};
use crate::rng::{substream, Stream};
use crate::train::Stage;

pub const FORMAT: &str = "instlabel-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub seed: u64,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub config_hash: String,
    pub code_version: String,
    /// Parameter hash of the teacher a student was distilled from.
    pub teacher_hash: Option<String>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub meta: CheckpointMeta,
    pub parameter_hash: String,
    pub parameters: BTreeMap<String, TensorRecord>,
}

/// SHA-256 over tensor names and little-endian parameter bytes.
pub fn parameter_hash(model: &MilModel) -> String {
    let mut h = Sha256::new();
    for ((name, _), data) in model.tensor_layout().iter().zip(model.tensors()) {
        h.update(name.as_bytes());
        h.update([0u8]);
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(model: &MilModel, meta: CheckpointMeta) -> Self {
        let parameters = model
            .tensor_layout()
            .into_iter()
            .zip(model.tensors())
            .map(|((name, shape), data)| (name, TensorRecord { shape, data: data.to_vec() }))
            .collect();
        Self {
            format: FORMAT.to_string(),
            spec: model.spec().clone(),
            meta,
            parameter_hash: parameter_hash(model),
            parameters,
        }
    }

    /// Rebuilds the model, checking that every expected tensor is present
    /// with the right shape and that nothing else is.
    pub fn model(&self) -> Result<MilModel> {
        if self.format != FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format '{}'", self.format)));
        }
        let mut model = MilModel::new(self.spec.clone(), &mut substream(0, Stream::Init))?;
        let layout = model.tensor_layout();
        if layout.len() != self.parameters.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.parameters.len(),
                layout.len()
            )));
        }
        for ((name, shape), dst) in layout.iter().zip(model.tensors_mut()) {
            let rec = self
                .parameters
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing tensor '{name}'")))?;
            if &rec.shape != shape || rec.data.len() != dst.len() {
                return Err(Error::shape(format!("{name} {shape:?}"), format!("{:?} with {} values", rec.shape, rec.data.len())));
            }
            dst.copy_from_slice(&rec.data);
        }
        if parameter_hash(&model) != self.parameter_hash {
            return Err(Error::invalid("checkpoint parameter hash does not match its contents"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::invalid(format!("checkpoint cannot be serialized: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}
