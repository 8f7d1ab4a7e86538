//! Deployment path: product embedding export to a binary cache, hot-query
//! embedding cache, a distilled shallow query encoder and query lookup.

mod cache;
mod distill;
mod server;


use serde::{Deserialize, Serialize};

pub use cache::{EmbeddingCache, CACHE_MAGIC, CACHE_VERSION, ID_WIDTH};
pub use distill::{distill, distill_query_encoder, mean_cosine};
pub use server::{normalize_query, query_hash, HotQueryCache, Server};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServingConfig {
    pub student_layers: usize,
    pub distill_steps: usize,
    pub distill_batch: usize,
    pub distill_lr: f32,
    /// Weight of the cosine loss (the only distillation term).
    pub distill_weight: f32,
    /// Unused by embedding-level distillation; kept for completeness.
    pub temperature: f32,
    /// Synthetic query texts generated for distillation.
    pub distill_queries: usize,
    /// Most clicked training queries precomputed into the hot cache.
    pub hot_queries: usize,
    /// Clusters of the approximate index; zero disables it.
    pub clusters: usize,
    pub probes: usize,
    pub k: usize,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            student_layers: 1,
            distill_steps: 600,
            distill_batch: 32,
            distill_lr: 1e-3,
            distill_weight: 1.0,
            temperature: 1.0,
            distill_queries: 3000,
            hot_queries: 65,
            clusters: 32,
            probes: 4,
            k: 10,
        }
    }
}

impl ServingConfig {
    pub fn validate(&self, teacher: &EncoderConfig) -> Result<()> {
        if self.student_layers == 0 || self.student_layers >= teacher.layers {
            return Err(Error::config(
                "serving.student_layers",
                format!("must be in 1..{} (teacher has {} layers)", teacher.layers, teacher.layers),
            ));
        }
        if self.distill_batch == 0 {
            return Err(Error::config("serving.distill_batch", "must be positive"));
        }
        if !(self.distill_weight > 0.0) {
            return Err(Error::config("serving.distill_weight", "must be positive"));
        }
        if !(self.distill_lr > 0.0) {
            return Err(Error::config("serving.distill_lr", "must be positive"));
        }
        if self.clusters > 0 && (self.probes == 0 || self.probes > self.clusters) {
            return Err(Error::config("serving.probes", "must be in 1..=serving.clusters"));
        }
        if self.k == 0 {
            return Err(Error::config("serving.k", "must be positive"));
        }
        Ok(())
    }
}
