use std::path::{Path, PathBuf};

use occf_core::data::{ColumnLayout, SplitRatios};
use occf_core::trainer::GridSpace;
use occf_core::{ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    #[default]
    Temporal,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Ratings file; relative paths resolve against the config file.
    pub path: PathBuf,
    pub layout: ColumnLayout,
    /// Ratings at or above this threshold count as interactions.
    pub eta: f64,
    pub split: SplitKind,
    pub split_seed: u64,
    pub ratios: SplitRatios,
    /// Fraction of users withheld from training for cold-start evaluation.
    pub holdout_fraction: f64,
    pub holdout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::new(),
            layout: ColumnLayout::default(),
            eta: 3.0,
            split: SplitKind::Temporal,
            split_seed: 0,
            ratios: SplitRatios::default(),
            holdout_fraction: 0.0,
            holdout_seed: 0,
        }
    }
}

/// Everything one experiment needs; serialized next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub output: PathBuf,
    /// Cutoffs for the @K metrics.
    pub ks: Vec<usize>,
    /// List length for the popularity histogram and cold-start ranking.
    pub popularity_k: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub grid: GridSpace,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::AutoRec,
            output: PathBuf::from("out"),
            ks: vec![5, 10, 20, 50],
            popularity_k: 10,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpace::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.path, &mut config.output] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: occf_core::Error| CliError::Usage(e.to_string());
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CliError::Usage("ks must be a nonempty list of positive cutoffs".into()));
        }
        if self.popularity_k == 0 {
            return Err(CliError::Usage("popularity_k must be positive".into()));
        }
        if !self.data.eta.is_finite() {
            return Err(CliError::Usage("eta must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(CliError::Usage("holdout_fraction must lie in [0, 1)".into()));
        }
        self.data.ratios.validate().map_err(usage)?;
        self.train.validate().map_err(usage)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
