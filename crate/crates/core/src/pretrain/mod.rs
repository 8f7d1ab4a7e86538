//! Pretraining of the shared encoder on masked language modelling, masked
//! patch modelling and text-image pair prediction, all from one mini-batch.

mod losses;
mod masking;
mod trainer;

#[cfg(test)]
mod tests;

pub use losses::{bce_loss, mlm_loss, mpm_loss, tip_loss, KL_CLAMP, PROB_CLAMP};
pub use masking::{apply_masks, mask_count, plan_masks, MaskAction, MaskPlan, MaskedInstance, MASK_RATIO};
pub use trainer::{
    pretrain, pretrain_losses, pretrain_step, sample_tip_pairs, PretrainBatch, PretrainConfig, PretrainData,
    PretrainInstance, PretrainLosses, TipPair,
};
