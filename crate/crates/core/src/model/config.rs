use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_CONTEXT_CAP;
use crate::error::{QaError, Result};

pub const ENCODER_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub dropout_rate: f64,
    pub embedding_dim: usize,
    pub encoder_layers: usize,
    pub context_cap: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 150,
            dropout_rate: 0.2,
            embedding_dim: 100,
            encoder_layers: ENCODER_LAYERS,
            context_cap: DEFAULT_CONTEXT_CAP,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 1 {
            return Err(QaError::Config("hidden size must be at least 1".into()));
        }
        if self.embedding_dim < 1 {
            return Err(QaError::Config("embedding dimension must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(QaError::Config(format!(
                "dropout rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.encoder_layers != ENCODER_LAYERS {
            return Err(QaError::Config(format!(
                "the encoder has exactly {ENCODER_LAYERS} layers, got {}",
                self.encoder_layers
            )));
        }
        if self.context_cap < 1 {
            return Err(QaError::Config("context cap must be at least 1".into()));
        }
        Ok(())
    }
}
