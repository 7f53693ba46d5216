//! Masked-token GPT: numerics, optimizer, checkpoints, training and
//! activation capture.

mod checkpoint;
mod gpt;
mod linalg;
mod optim;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, CHECKPOINT_VERSION};
pub use gpt::{masked_loss, masked_loss_and_grad, Gpt, ModelConfig, ParamInfo, Trace};
pub use linalg::{add_into, gemm, Mat, MatMut, Real, Tensor};
pub use optim::{adamw_step, AdamW, OptimState};
pub use train::{
    encode_corpus, evaluate, train, validation_examples, Dtype, EncodedCorpus, LogRow, TrainConfig, TrainOutcome,
};

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("layer {layer} out of range (model has {layers})")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("position {position} out of range for a sequence of {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}); last finite loss {last_loss:?}")]
    NonFinite { step: u64, epoch: usize, batch: usize, last_loss: Option<f64> },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// One captured residual-stream vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry<T> {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<T>,
}

/// Post-block residual-stream vectors of one input, keyed by
/// `(layer, position)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet<T> {
    pub hand_id: u64,
    pub entries: Vec<ActivationEntry<T>>,
}

impl<T> ActivationSet<T> {
    pub fn get(&self, layer: usize, position: usize) -> Option<&[T]> {
        self.entries.iter().find(|e| e.layer == layer && e.position == position).map(|e| e.vector.as_slice())
    }
}

/// Activations after each requested block at each requested position.
pub fn capture_activations<T: Real>(
    model: &Gpt<T>,
    hand_id: u64,
    input_ids: &[TokenId],
    layers: &[usize],
    positions: &[usize],
) -> Result<ActivationSet<T>, ModelError> {
    let cfg = model.config();
    if let Some(&layer) = layers.iter().find(|&&l| l >= cfg.layers) {
        return Err(ModelError::LayerOutOfRange { layer, layers: cfg.layers });
    }
    if let Some(&position) = positions.iter().find(|&&p| p >= input_ids.len()) {
        return Err(ModelError::PositionOutOfRange { position, len: input_ids.len() });
    }
    let (_, acts) = model.forward_with_activations(input_ids)?;
    let mut entries = Vec::with_capacity(layers.len() * positions.len());
    for &layer in layers {
        for &position in positions {
            entries.push(ActivationEntry { layer, position, vector: acts[layer].row(position).to_vec() });
        }
    }
    Ok(ActivationSet { hand_id, entries })
}
