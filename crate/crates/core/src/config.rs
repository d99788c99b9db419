//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::Task;
use crate::features::FeatureConfig;
use crate::infomax::DiscriminatorConfig;
use crate::training::TrainConfig;

fn default_task() -> Task {
    Task::Classify
}
fn default_min_count() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "default_task")]
    pub task: Task,
    /// Tokens seen fewer times in the training split map to the unknown token.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Optional pretrained vectors, one `token v1 v2 ...` line each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
}

/// Encoder settings; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub conv_layers_per_block: usize,
    pub conv_kernel: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_classes: usize,
    pub symmetric_prediction: bool,
    pub share_towers: bool,
    pub freeze_embeddings: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            embed_dim: d.embed_dim,
            num_blocks: d.num_blocks,
            conv_layers_per_block: d.conv_layers_per_block,
            conv_kernel: d.conv_kernel,
            hidden_dim: d.hidden_dim,
            output_dim: d.output_dim,
            num_classes: d.num_classes,
            symmetric_prediction: d.symmetric_prediction,
            share_towers: d.share_towers,
            freeze_embeddings: d.freeze_embeddings,
        }
    }
}

impl EncoderSection {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            conv_layers_per_block: self.conv_layers_per_block,
            conv_kernel: self.conv_kernel,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            num_classes: self.num_classes,
            symmetric_prediction: self.symmetric_prediction,
            share_towers: self.share_towers,
            freeze_embeddings: self.freeze_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderSection,
    pub features: FeatureConfig,
    #[serde(default)]
    pub critic: DiscriminatorConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.check_paths()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.train.validate()?;
        self.encoder.with_vocab(2).validate()?;
        if self.data.min_count == 0 {
            return Err(Error::Config("data.min_count must be at least 1".into()));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        for p in [&mut self.data.dev, &mut self.data.test, &mut self.data.vectors]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    fn check_paths(&self) -> Result<()> {
        let d = &self.data;
        let all = std::iter::once(&d.train)
            .chain(d.dev.iter())
            .chain(d.test.iter())
            .chain(d.vectors.iter());
        for p in all {
            if !p.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// TOML with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
