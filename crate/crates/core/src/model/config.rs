use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RMSNorm epsilon.
pub const DEFAULT_EPS: f32 = 1e-6;

/// Attention/FFN shape of one transformer block.
///
/// Blocks may differ after surgery: FFN budgets are per layer, and a layer
/// that absorbed donor KV groups can carry a different group count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub query_heads: usize,
    pub kv_groups: usize,
    pub ffn_dim: usize,
    /// Post-attention RMSNorm present (false once absorbed).
    pub attn_post_norm: bool,
    /// Post-FFN RMSNorm present (false once absorbed).
    pub ffn_post_norm: bool,
}

impl LayerConfig {
    pub fn heads_per_group(&self) -> usize {
        self.query_heads / self.kv_groups
    }

    /// KV group of query head `head` (contiguous blocks).
    pub fn group_of(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub eps: f32,
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    /// Every layer shares the same shape, and both post-norms are present.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        num_layers: usize,
        hidden: usize,
        query_heads: usize,
        kv_groups: usize,
        head_dim: usize,
        ffn_dim: usize,
        vocab: usize,
        eps: f32,
    ) -> Self {
        let layer = LayerConfig {
            query_heads,
            kv_groups,
            ffn_dim,
            attn_post_norm: true,
            ffn_post_norm: true,
        };
        Self {
            hidden,
            head_dim,
            vocab,
            eps,
            layers: vec![layer; num_layers],
        }
    }

    /// L=2, d=8, 4 query heads in 2 groups, d_head=4, d_ffn=16, V=32.
    pub fn toy() -> Self {
        Self::uniform(2, 8, 4, 2, 4, 16, 32, DEFAULT_EPS)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("num_layers", self.layers.len()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.query_heads == 0 || l.kv_groups == 0 || l.ffn_dim == 0 {
                return Err(Error::Config(format!(
                    "layer {i}: head, group and ffn counts must be >= 1"
                )));
            }
            if l.query_heads % l.kv_groups != 0 {
                return Err(Error::Config(format!(
                    "layer {i}: {} query heads not divisible by {} KV groups",
                    l.query_heads, l.kv_groups
                )));
            }
        }
        Ok(())
    }

    /// Number of RMSNorm layers in the model, final norm included.
    pub fn num_norms(&self) -> usize {
        1 + self
            .layers
            .iter()
            .map(|l| 2 + l.attn_post_norm as usize + l.ffn_post_norm as usize)
            .sum::<usize>()
    }
}
