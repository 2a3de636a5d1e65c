use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::task::TaskSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTPSLCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntryHeader {
    name: String,
    shape: Vec<usize>,
}

/// Everything in a checkpoint besides the parameter values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tasks: TaskSet,
    pub model: ModelConfig,
    /// Free-form echo of the run configuration.
    pub run: serde_json::Value,
    pub epoch: usize,
    params: Vec<ParamEntryHeader>,
}

/// Serialises every parameter in store order as `f64`.
pub fn checkpoint_bytes(model: &ModelState, run: &impl Serialize, epoch: usize) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for e in model.store.entries() {
        params.push(ParamEntryHeader { name: e.name.clone(), shape: e.value.shape().to_vec() });
        container::put_f64s(&mut payload, e.value.data());
    }
    let header = CheckpointHeader {
        tasks: model.tasks.clone(),
        model: model.config.clone(),
        run: serde_json::to_value(run)?,
        epoch,
        params,
    };
    container::encode(MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelState, run: &impl Serialize, epoch: usize) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, run, epoch)?)?;
    Ok(())
}

/// Rebuilds the model described by a checkpoint and loads its values.
pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelState, CheckpointHeader)> {
    let (header, payload): (CheckpointHeader, _) = container::decode(MAGIC, CHECKPOINT_VERSION, bytes)?;
    let mut reader = Reader::new(payload);
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n = p.shape.iter().product();
        values.push((p.name.clone(), Tensor::from_vec(&p.shape, reader.f64s(n)?)?));
    }
    reader.finish()?;
    let mut model = ModelState::new(&header.tasks, &header.model, 0)?;
    model
        .store
        .load_values(values)
        .map_err(|e| Error::Format(format!("checkpoint does not match its model description: {e}")))?;
    Ok((model, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, CheckpointHeader)> {
    model_from_checkpoint_bytes(&std::fs::read(path)?)
}
