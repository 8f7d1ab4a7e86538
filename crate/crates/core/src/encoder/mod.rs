//! The shared multimodal transformer: input embedding, post-norm encoder
//! stack, `[CLS]` pooling, and the binary checkpoint format.

mod checkpoint;
mod config;
mod model;
mod sequence;


pub use checkpoint::{Checkpoint, Section, SectionTag};
pub use config::EncoderConfig;
pub use model::{Encoded, LayerIds, Linear, Model, ModelIds, Norm, TransformerOutput, DISC_HIDDEN};
pub use sequence::{segment, ImageTokens, InputSequence};
