#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tim::corpus::{TextPair, TokenizedExample, Vocabulary};
use tim::encoder::EncoderConfig;
use tim::features::FeatureConfig;
use tim::infomax::DiscriminatorConfig;
use tim::model::TimModel;
use tim::params::ParameterStore;

pub fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        embed_dim: 5,
        num_blocks: 3,
        conv_layers_per_block: 2,
        conv_kernel: 3,
        hidden_dim: 4,
        output_dim: 3,
        num_classes: 2,
        symmetric_prediction: false,
        share_towers: true,
        freeze_embeddings: false,
    }
}

pub fn tiny_critic() -> DiscriminatorConfig {
    DiscriminatorConfig {
        hidden_units: 6,
        hidden_layers: 2,
    }
}

pub fn build(
    enc: EncoderConfig,
    features: FeatureConfig,
    critic: DiscriminatorConfig,
    seed: u64,
) -> (TimModel, ParameterStore) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TimModel::new(enc, features, critic, &mut store, &mut rng).unwrap();
    (model, store)
}

pub fn tokenize_all(vocab: &Vocabulary, pairs: &[TextPair]) -> Vec<TokenizedExample> {
    pairs.iter().map(|p| vocab.tokenize_pair(p).unwrap()).collect()
}

/// Desk-scale encoder used by the learning runs.
pub fn desk_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        embed_dim: 64,
        num_blocks: 2,
        conv_layers_per_block: 1,
        conv_kernel: 3,
        hidden_dim: 32,
        output_dim: 32,
        num_classes: 2,
        symmetric_prediction: false,
        share_towers: true,
        freeze_embeddings: true,
    }
}

pub fn desk_data() -> tim::synth::SharedTokenConfig {
    tim::synth::SharedTokenConfig {
        content_vocab: 50,
        ..tim::synth::SharedTokenConfig::default()
    }
}

pub fn desk_critic() -> DiscriminatorConfig {
    DiscriminatorConfig {
        hidden_units: 64,
        hidden_layers: 2,
    }
}

pub fn desk_train(max_steps: u64) -> tim::training::TrainConfig {
    tim::training::TrainConfig {
        learning_rate: 2e-3,
        critic_learning_rate: Some(2e-4),
        batch_size: 32,
        max_steps,
        eval_every: 200,
        ..tim::training::TrainConfig::default()
    }
}

/// Encoder for the long-text grid.
pub fn long_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 32,
        hidden_dim: 24,
        output_dim: 24,
        freeze_embeddings: false,
        ..desk_encoder(vocab_size)
    }
}

pub fn long_train() -> tim::training::TrainConfig {
    tim::training::TrainConfig {
        learning_rate: 2e-3,
        batch_size: 16,
        max_steps: 150,
        eval_every: 50,
        ..tim::training::TrainConfig::default()
    }
}
