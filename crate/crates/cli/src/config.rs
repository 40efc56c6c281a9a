//! Experiment configuration: one JSON file drives every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use roadseg_core::distill::DistillConfig;
use roadseg_core::segnet::NetConfig;
use roadseg_core::train::{AdaptConfig, SgdConfig};
use roadseg_core::weather::CorruptionSpec;

/// What `gen-data` produces: clean train/holdout groups plus one target
/// group per ladder entry. Target groups share base scenes, so severities
/// are directly comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub train_scenes: usize,
    pub holdout_scenes: usize,
    pub target_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub ladder: Vec<CorruptionSpec>,
}

impl DatasetRecipe {
    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.train_scenes > 0, "train_scenes must be positive");
        anyhow::ensure!(
            self.width >= 16 && self.height >= 16,
            "scene size must be at least 16x16"
        );
        for spec in &self.ladder {
            spec.validate()
                .map_err(|e| anyhow::anyhow!("ladder entry invalid: {e}"))?;
        }
        Ok(())
    }
}

/// Everything needed to reproduce a full experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub net: NetConfig,
    /// Pretraining optimizer settings.
    pub sgd: SgdConfig,
    pub adapt: AdaptConfig,
    pub distill: DistillConfig,
    pub dataset: DatasetRecipe,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 64x64 scenes, the fog severity ladder, and
    /// learning rates tuned for the per-pixel-mean objectives.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            seed: 42,
            net: NetConfig::default(),
            sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 8,
                epochs: 8,
            },
            adapt: AdaptConfig {
                sgd: SgdConfig {
                    lr: 0.02,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 4,
                    epochs: 1,
                },
                step1_lr: 0.02,
                ..AdaptConfig::default()
            },
            distill: DistillConfig {
                sgd: SgdConfig {
                    lr: 0.02,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 10,
                    epochs: 1,
                },
                epochs: 30,
                ..DistillConfig::default()
            },
            dataset: DatasetRecipe {
                train_scenes: 200,
                holdout_scenes: 50,
                target_scenes: 12,
                width: 64,
                height: 64,
                ladder: vec![
                    CorruptionSpec::fog(375.0),
                    CorruptionSpec::fog(150.0),
                    CorruptionSpec::fog(75.0),
                    CorruptionSpec::fog(30.0),
                ],
            },
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net
            .validate()
            .map_err(|e| anyhow::anyhow!("net config: {e}"))?;
        self.sgd
            .validate()
            .map_err(|e| anyhow::anyhow!("sgd config: {e}"))?;
        self.adapt
            .validate()
            .map_err(|e| anyhow::anyhow!("adapt config: {e}"))?;
        self.distill
            .validate()
            .map_err(|e| anyhow::anyhow!("distill config: {e}"))?;
        self.dataset.validate()?;
        anyhow::ensure!(
            self.net.width == self.dataset.width && self.net.height == self.dataset.height,
            "net input size {}x{} does not match dataset size {}x{}",
            self.net.width,
            self.net.height,
            self.dataset.width,
            self.dataset.height
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.dataset.width = 32;
        assert!(cfg.validate().is_err());
    }
}
