//! The matching network, its feature extractor and critic as one unit.

use rand::Rng;

use crate::corpus::PAD;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMode, LocalFeatureSet};
use crate::graph::{masked_softmax_rows, Graph};
use crate::infomax::{Discriminator, DiscriminatorConfig};
use crate::params::{Group, Mat, ParamId, ParameterStore};

const FEATURE_TABLE: &str = "features.word_embedding";

#[derive(Clone, Debug)]
pub struct TimModel {
    pub encoder: Encoder,
    pub critic: Discriminator,
    pub features: FeatureConfig,
    pub critic_config: DiscriminatorConfig,
    /// Table that word-mode features are copied from.
    feature_table: ParamId,
}

impl TimModel {
    pub fn new<R: Rng>(
        encoder: EncoderConfig,
        features: FeatureConfig,
        critic: DiscriminatorConfig,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        features.validate()?;
        let enc = Encoder::new(encoder, store, rng)?;
        let feature_table = if features.mode == FeatureMode::Word && !features.share_embeddings {
            let table = store.get(enc.embedding).value.mapv(|_| rng.random_range(-1.0..1.0));
            let mut table = table;
            table.row_mut(PAD).fill(0.0);
            let id = store.register(FEATURE_TABLE, Group::Discriminator, table)?;
            store.set_trainable(id, false);
            id
        } else {
            enc.embedding
        };
        let c = &enc.config;
        let disc = Discriminator::for_features(
            critic.clone(),
            &features,
            c.vocab_size,
            c.embed_dim,
            c.output_dim,
            store,
            rng,
        )?;
        Ok(Self {
            encoder: enc,
            critic: disc,
            features,
            critic_config: critic,
            feature_table,
        })
    }

    /// Rebinds to a store loaded from a checkpoint.
    pub fn bind(
        encoder: EncoderConfig,
        features: FeatureConfig,
        critic: DiscriminatorConfig,
        store: &ParameterStore,
    ) -> Result<Self> {
        features.validate()?;
        let enc = Encoder::bind(encoder, store)?;
        let feature_table = if features.mode == FeatureMode::Word && !features.share_embeddings {
            store
                .id(FEATURE_TABLE)
                .ok_or_else(|| Error::Corrupt(format!("missing parameter `{FEATURE_TABLE}`")))?
        } else {
            enc.embedding
        };
        let c = &enc.config;
        let disc = Discriminator::bind(
            critic.clone(),
            &features,
            c.vocab_size,
            c.embed_dim,
            c.output_dim,
            store,
        )?;
        Ok(Self {
            encoder: enc,
            critic: disc,
            features,
            critic_config: critic,
            feature_table,
        })
    }

    pub fn feature_table<'a>(&self, store: &'a ParameterStore) -> &'a Mat {
        &store.get(self.feature_table).value
    }

    /// Local features of one text from the current parameter snapshot.
    pub fn extract(&self, store: &ParameterStore, tokens: &[usize]) -> Result<LocalFeatureSet> {
        let tokens: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD).collect();
        self.features.extract(&tokens, self.feature_table(store))
    }

    /// Unnormalized class scores for one pair.
    pub fn class_scores(&self, store: &ParameterStore, tokens_a: &[usize], tokens_b: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.encoder.forward_pair(&mut g, store, tokens_a, tokens_b)?;
        Ok(g.value(out.scores).iter().copied().collect())
    }

    /// Softmax-normalized class probabilities for one pair.
    pub fn probabilities(&self, store: &ParameterStore, tokens_a: &[usize], tokens_b: &[usize]) -> Result<Vec<f64>> {
        let scores = self.class_scores(store, tokens_a, tokens_b)?;
        let m = Mat::from_shape_vec((1, scores.len()), scores).expect("row");
        let all = vec![true; m.ncols()];
        Ok(masked_softmax_rows(&m, &all).iter().copied().collect())
    }
}
