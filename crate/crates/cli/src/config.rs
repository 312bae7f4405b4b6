//! Run configuration: JSON with a strict schema (unknown keys are errors so
//! ablation scripts fail fast on typos). Every command writes its fully
//! resolved configuration next to its outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ppcnn::backbone::{ModelSpec, NetworkSpec, OptimizerConfig, PPConvTemplate};
use ppcnn::datametrics::Protocol;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub class_count: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub points_per_scene: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            class_count: 4,
            train_scenes: 3,
            val_scenes: 2,
            points_per_scene: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// "s3dis", "shapenet", "toy", or a path to a NetworkSpec JSON file.
    pub network: String,
    #[serde(default)]
    pub ppconv: PPConvTemplate,
    pub protocol: Protocol,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub data: DataConfig,
    /// Override the protocol's block point count (desk-scale runs).
    #[serde(default)]
    pub block_points: Option<usize>,
    /// Override the protocol's block side length in meters.
    #[serde(default)]
    pub block_side: Option<f64>,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub deterministic: bool,
}

fn default_checkpoint_every() -> usize {
    100
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: "toy".into(),
            ppconv: PPConvTemplate::default(),
            protocol: Protocol::Pv,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            batch_size: 2,
            steps: 200,
            checkpoint_every: default_checkpoint_every(),
            data: DataConfig::default(),
            block_points: Some(512),
            block_side: None,
            threads: 0,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            bail!("batch_size and steps must be positive");
        }
        if self.data.class_count < 2 {
            bail!("class_count must be at least 2");
        }
        self.model_spec()?.network.validate()?;
        Ok(())
    }

    /// Resolve the network name (or spec file) plus the PPConv template into
    /// a buildable model spec, checked against the data class count.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let network = match self.network.as_str() {
            "s3dis" => NetworkSpec::s3dis(),
            "shapenet" => NetworkSpec::shapenet(),
            "toy" => NetworkSpec::toy(self.data.class_count),
            path => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading network spec {path}"))?;
                serde_json::from_str::<NetworkSpec>(&text)
                    .with_context(|| format!("parsing network spec {path}"))?
            }
        };
        if network.class_count != self.data.class_count {
            bail!(
                "network has {} classes but the data config declares {}",
                network.class_count,
                self.data.class_count
            );
        }
        Ok(ModelSpec {
            network,
            ppconv: self.ppconv.clone(),
        })
    }

    pub fn block_points(&self) -> usize {
        self.block_points.unwrap_or(self.protocol.block_points())
    }

    pub fn block_side(&self) -> f64 {
        self.block_side.unwrap_or(self.protocol.block_side())
    }

    /// Write the fully resolved configuration next to the run outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
