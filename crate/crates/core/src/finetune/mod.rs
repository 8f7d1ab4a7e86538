//! Dual-encoder fine-tuning: in-batch semantic matching over clicked pairs,
//! hot-query augmentation of products, an adversarial domain discriminator
//! trained in alternation with the encoder, and the partitioned batch sampler.

mod hot;
mod losses;
mod probe;
mod sampler;
mod trainer;


pub use hot::{compute_hot_queries, HotQueryTable, HOT_LIMIT};
pub use losses::{adversarial_loss, batch_probabilities, confusion_loss, semantic_matching_loss, UNIT_TOLERANCE};
pub use probe::{domain_probe_accuracy, LinearProbe};
pub use sampler::{
    hard_negative_fraction, partition_dataset, sample_batch, training_pairs, Partition, TrainPair,
};
pub use trainer::{
    discriminator_objective, embed_all, encode_stack, encoder_objective, finetune, minimax_step, product_sequence, AdversarialMode,
    query_sequence, FinetuneBatch, FinetuneConfig, FinetuneData, FinetuneReport, Optimizers, Phase, StepLosses,
    StepRecord,
};
