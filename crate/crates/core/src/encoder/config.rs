use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer encoder hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Std of the truncated-normal init for attention and feed-forward weights.
    pub init_std: f64,
    /// Std of the truncated-normal init for token and position embeddings.
    pub embed_init_std: f64,
}

impl EncoderConfig {
    /// Full-size student: 6 layers, 8 heads, 768 hidden, 2048 feed-forward, dropout 0.3.
    pub fn student(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 6,
            n_heads: 8,
            d_hidden: 768,
            d_ff: 2048,
            dropout: 0.3,
            max_len: 512,
            vocab_size,
            init_std: 0.02,
            embed_init_std: 0.02,
        }
    }

    /// Small student that trains in seconds on one core.
    pub fn desk_student(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_hidden: 64,
            d_ff: 128,
            dropout: 0.3,
            max_len: 512,
            vocab_size,
            init_std: 0.1,
            embed_init_std: 0.001,
        }
    }

    /// Default teacher trained from scratch: 2 layers, 4 heads, d=128, FF=256.
    pub fn desk_teacher(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_hidden: 128,
            d_ff: 256,
            dropout: 0.1,
            max_len: 512,
            vocab_size,
            init_std: 0.1,
            embed_init_std: 0.001,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_hidden", self.d_hidden),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be >= 1")));
            }
        }
        if self.d_hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_hidden {} not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        if !(self.init_std > 0.0) || !(self.embed_init_std > 0.0) {
            return Err(Error::Config("init standard deviations must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
