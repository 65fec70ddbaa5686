//! JSON configuration files. Every field has a default, so a file only needs
//! the settings it changes; command-line flags are applied on top.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nextk::dataset::PreparedData;
use nextk::nnet::ModelConfig;
use nextk::pipeline::PipelineConfig;
use nextk::seqcodec::Layout;
use nextk::training::TrainConfig;

pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Decoder shape. `n_max` defaults to the longest test history in the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub n_max: Option<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(1, 1, 1);
        Self {
            embed_dim: desk.embed_dim,
            num_blocks: desk.num_blocks,
            num_heads: desk.num_heads,
            ff_dim: desk.ff_dim,
            n_max: None,
            dropout_rate: desk.dropout_rate,
        }
    }
}

/// Settings of `distill` and of `fit-teacher --kind shifting`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl SupervisedConfig {
    pub fn model_config(
        &self,
        data: &PreparedData,
        k: usize,
        layout: Layout,
    ) -> Result<ModelConfig> {
        let longest = data
            .split
            .users
            .iter()
            .map(|u| u.test_history().len())
            .max()
            .unwrap_or(1);
        let m = &self.model;
        let cfg = ModelConfig {
            num_items: data.split.num_items,
            embed_dim: m.embed_dim,
            num_blocks: m.num_blocks,
            num_heads: m.num_heads,
            ff_dim: m.ff_dim,
            n_max: m.n_max.unwrap_or(longest),
            k,
            dropout_rate: m.dropout_rate,
            layout,
        };
        cfg.validate()?;
        self.train.validate()?;
        Ok(cfg)
    }
}

/// Settings of `finetune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub pipeline: PipelineConfig,
    /// Optimizer steps.
    pub steps: usize,
    pub delayed_reward: bool,
    pub max_seconds: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            steps: 64_000,
            delayed_reward: false,
            max_seconds: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"train": {"learning_rate": 0.01}, "model": {"embed_dim": 16}}"#,
        )
        .unwrap();
        let cfg: SupervisedConfig = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.model.num_blocks, ModelSection::default().num_blocks);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"stpes": 10}"#).unwrap();
        assert!(load_config::<FinetuneConfig>(Some(&path)).is_err());
    }

    #[test]
    fn finetune_defaults() {
        let cfg = FinetuneConfig::default();
        assert_eq!(cfg.steps, 64_000);
        assert_eq!(cfg.pipeline.cache_m, 16);
        assert_eq!(cfg.pipeline.optimizer.publish_every, 16);
    }
}
