//! The single JSON run configuration.

use std::path::{Path, PathBuf};

use dunet::augment::FilterSpec;
use dunet::dataset::DEFAULT_RATIOS;
use dunet::model::DunetConfig;
use dunet::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model shape; defaults to the desk configuration sized to the dataset.
    #[serde(default)]
    pub model: Option<DunetConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    #[serde(default)]
    pub stream: StreamSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: Option<PathBuf>,
    pub split_ratios: (f64, f64, f64),
    pub split_seed: u64,
    /// Split to train on when the dataset records splits.
    pub train_split: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { root: None, split_ratios: DEFAULT_RATIOS, split_seed: 0, train_split: "train".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub period_ms: f64,
    pub score_threshold: f64,
    pub min_gap_ms: f64,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            period_ms: dunet::stream::default_period_ms(),
            score_threshold: dunet::geometry::DecodeParams::STREAM.score_threshold,
            min_gap_ms: dunet::augment::MIN_GAP_MS,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        // Relative dataset roots are relative to the config file.
        if let (Some(root), Some(dir)) = (cfg.dataset.root.as_mut(), path.parent()) {
            if root.is_relative() {
                *root = dir.join(&*root);
            }
        }
        Ok(cfg)
    }
}
