//! Multinomial logistic regression over sparse features, with an optional
//! LoRA adapter on the weight matrix.

mod checkpoint;
mod forward;
mod params;
mod train;

use thiserror::Error;

pub use checkpoint::{params_digest, read_checkpoint, write_checkpoint, CheckpointHeader};
pub use forward::{
    accuracy, argmax, batch_loss, forward, grad, mean_loss, nll_loss, sgd_step, Direction, Gradients, SparseGrad,
    LOSS_FLOOR,
};
pub use params::{merge_adapter, DenseParams, LoraAdapter, LORA_INIT_RANGE};
pub use train::{fit, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn new(indices: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), values.len());
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self { indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest index plus one, or 0 when empty.
    pub fn min_dims(&self) -> usize {
        self.indices.last().map_or(0, |&i| i as usize + 1)
    }

    pub fn to_dense(&self, dims: usize) -> Vec<f64> {
        let mut out = vec![0.0; dims];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: SparseVec,
    pub y: usize,
}
