//! Architecture hyperparameters shared by both model families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Reasoning loops: how many times the full layer stack is applied.
    pub loops: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults used by tests and the sample configs.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 4,
            loops: 3,
            vocab_size: 32,
            max_seq_len: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// FFN width is a fixed multiple of the hidden size.
    pub fn ffn_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.hidden_dim == 0
            || self.n_heads == 0
            || self.loops == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        Ok(())
    }
}
