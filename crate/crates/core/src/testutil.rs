//! Small shared fixtures for unit tests.

use crate::assembly::{FeatureBank, Modalities, SequenceBuilder, SequenceConfig};
use crate::encoder::{EncoderConfig, Model};
use crate::synth::{ClickConfig, Corpus, DataConfig, Vocab};
use crate::vision::{FrontEnd, VisionConfig};

pub fn tiny_vision() -> VisionConfig {
    VisionConfig {
        roi_grid: 2,
        roi_canonical: 16,
        pixel_target: 16,
        pixel_patch: 8,
        feature_dim: 8,
        ..VisionConfig::default()
    }
}

pub fn tiny_encoder() -> EncoderConfig {
    let v = tiny_vision();
    EncoderConfig {
        layers: 2,
        hidden_dim: 16,
        heads: 2,
        ff_dim: 32,
        vocab_size: Vocab::default().len(),
        max_positions: 64,
        segment_vocab: 4,
        retrieval_dim: 8,
        patch_feature_dim: v.feature_dim,
        pixel_patch_dim: v.pixel_dim(3),
        dropout: 0.1,
    }
}

pub fn tiny_data() -> DataConfig {
    DataConfig {
        products: 48,
        categories: 4,
        image_size: 32,
        clicks: ClickConfig {
            queries: 40,
            events: 1200,
            ..ClickConfig::default()
        },
    }
}

pub struct Fixture {
    pub corpus: Corpus,
    pub bank: FeatureBank,
    pub model: Model,
    pub builder: SequenceBuilder,
}

pub fn fixture(seed: u64) -> Fixture {
    let corpus = Corpus::generate(&tiny_data(), seed).unwrap();
    let front = FrontEnd::new(tiny_vision()).unwrap();
    let bank = FeatureBank::build(&corpus, &front).unwrap();
    let cfg = tiny_encoder();
    let builder = SequenceBuilder::new(
        SequenceConfig {
            max_text: 16,
            hot_budget: 12,
        },
        Modalities::default(),
        cfg.max_positions,
    );
    let model = Model::new(cfg, seed).unwrap();
    Fixture {
        corpus,
        bank,
        model,
        builder,
    }
}
