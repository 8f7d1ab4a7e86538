//! Cross-modal dense retrieval with a shared multimodal transformer.

pub mod assembly;
pub mod config;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod pipeline;
pub mod pretrain;
pub mod retrieval;
pub mod serving;
pub mod synth;
pub mod tensor;
pub mod vision;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
