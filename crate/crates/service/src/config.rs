use std::path::Path;

use anyhow::Context;
use glacier_core::analysis::Palette;
use glacier_core::geodata::SceneConfig;
use glacier_core::train::{AdamConfig, LossConfig, TrainConfig};
use glacier_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub patches: usize,
    pub patch_size: usize,
    pub test_fraction: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { patches: 200, patch_size: 64, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub palette: Palette,
    /// Channels drawn into each activation grid.
    pub grid_tiles: usize,
    pub histogram_bins: usize,
    /// Layers rendered per patch; empty means the eight default taps.
    pub layers: Vec<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { palette: Palette::default(), grid_tiles: 8, histogram_bins: 64, layers: Vec::new() }
    }
}

/// Every tunable of the pipeline, loaded from one JSON file. Missing
/// sections and fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub sampling: SamplingConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub analysis: AnalysisConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn tap_layers(&self) -> Vec<String> {
        if self.analysis.layers.is_empty() {
            self.unet.paper_tap_layers()
        } else {
            self.analysis.layers.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"unet": {"base_channels": 8}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.unet.base_channels, 8);
        assert_eq!(cfg.unet.depth, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.sampling, SamplingConfig::default());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"trian": {}}"#).is_err());
    }
}
