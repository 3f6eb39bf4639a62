//! The TOML run configuration: one optional table per stage.

use std::path::{Path, PathBuf};

use lesionsynth::cluster::{ClusterConfig, ModelMode};
use lesionsynth::diffusion::TrainConfig;
use lesionsynth::features::ExtractorKind;
use lesionsynth::metrics::EvalConfig;
use lesionsynth::repaint::GenerationConfig;
use lesionsynth::seg::{AugPlan, SegConfig};
use lesionsynth::style::StyleConfig;
use lesionsynth::toy::ToyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
    /// Denoiser checkpoint for `denoiser-taps`.
    pub checkpoint: Option<PathBuf>,
    pub timestep: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::SeededRandomConv,
            seed: 0,
            checkpoint: None,
            timestep: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    /// Side length images are loaded at.
    pub size: usize,
    pub model_mode: ModelMode,
    pub features: FeatureConfig,
    pub toy: ToyConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    pub generation: GenerationConfig,
    pub style: StyleConfig,
    pub eval: EvalConfig,
    pub seg: SegConfig,
    pub augment: AugPlan,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 32,
            model_mode: ModelMode::Cluster,
            features: FeatureConfig::default(),
            toy: ToyConfig::default(),
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            generation: GenerationConfig::default(),
            style: StyleConfig::default(),
            eval: EvalConfig::default(),
            seg: SegConfig::default(),
            augment: AugPlan::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
