use serde::{Deserialize, Serialize};

use crate::attention::PositionalStrategy;
use crate::error::{HarpeError, Result};

fn default_init_std() -> f64 {
    0.02
}

/// Shape and positional scheme of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Longest sequence the model may be run on (training or evaluation).
    pub max_context: usize,
    pub strategy: PositionalStrategy,
    pub seed: u64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Derives `head_dim = width / n_heads`.
    pub fn new(
        vocab: usize,
        width: usize,
        n_layers: usize,
        n_heads: usize,
        max_context: usize,
        strategy: PositionalStrategy,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || width % n_heads != 0 {
            return Err(HarpeError::invalid(format!(
                "width {width} is not divisible by {n_heads} heads"
            )));
        }
        let cfg = Self {
            vocab,
            width,
            n_layers,
            n_heads,
            head_dim: width / n_heads,
            max_context,
            strategy,
            seed,
            init_std: default_init_std(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(HarpeError::invalid(format!(
                "vocab must be at least 2, got {}",
                self.vocab
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.max_context == 0 {
            return Err(HarpeError::invalid(
                "n_layers, n_heads and max_context must be positive",
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(HarpeError::invalid(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.width != self.n_heads * self.head_dim {
            return Err(HarpeError::invalid(format!(
                "width {} != n_heads {} * head_dim {}",
                self.width, self.n_heads, self.head_dim
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(HarpeError::invalid("init_std must be positive"));
        }
        self.strategy.validate(self.n_heads)
    }

    pub fn hidden(&self) -> usize {
        4 * self.width
    }
}
