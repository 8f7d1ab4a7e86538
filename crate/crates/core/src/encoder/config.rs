use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the shared transformer and its projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub segment_vocab: usize,
    pub retrieval_dim: usize,
    /// Width of the frozen patch features fed to the patch projection.
    pub patch_feature_dim: usize,
    /// Flattened pixel-patch width (`h * w * C`).
    pub pixel_patch_dim: usize,
    pub dropout: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            ff_dim: 256,
            vocab_size: 256,
            max_positions: 128,
            segment_vocab: 4,
            retrieval_dim: 32,
            patch_feature_dim: 128,
            pixel_patch_dim: 192,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.layers", self.layers),
            ("encoder.hidden_dim", self.hidden_dim),
            ("encoder.heads", self.heads),
            ("encoder.ff_dim", self.ff_dim),
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.max_positions", self.max_positions),
            ("encoder.retrieval_dim", self.retrieval_dim),
            ("encoder.patch_feature_dim", self.patch_feature_dim),
            ("encoder.pixel_patch_dim", self.pixel_patch_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::config(
                "encoder.heads",
                format!("hidden_dim {} not divisible by {} heads", self.hidden_dim, self.heads),
            ));
        }
        if self.segment_vocab < 4 {
            return Err(Error::config("encoder.segment_vocab", "must be at least 4"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}
