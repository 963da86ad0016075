use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty source sequence")]
    EmptySource,
    #[error("parameter shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Transformer hyperparameters. Encoder and decoder share depth and width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Share the decoder embedding with the output projection.
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ModelConfig {
    /// Small enough for finite-difference checks: 2 layers, 2 heads, 64/128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            embed_dim: 64,
            ffn_dim: 128,
            dropout: 0.1,
            attention_dropout: 0.0,
            vocab_size,
            max_len: 256,
            seed: 1,
            tie_output: false,
        }
    }

    /// The IWSLT-sized transformer: 6 layers, 4 heads, 512/1024, dropout 0.3.
    pub fn transformer_iwslt(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 6,
            heads: 4,
            embed_dim: 512,
            ffn_dim: 1024,
            dropout: 0.3,
            attention_dropout: 0.1,
            vocab_size,
            max_len: 1024,
            seed: 1,
            tie_output: false,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(vocab_size)),
            "transformer_iwslt" | "transformer_iwslt_de_en" => Some(Self::transformer_iwslt(vocab_size)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return bad("layers, heads, embed_dim and ffn_dim must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }
}
