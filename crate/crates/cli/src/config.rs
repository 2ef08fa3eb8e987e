use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use stdgrl_core::data::{
    chronological_split, load_flow_file, make_windows, zscore_fit, FlowDataset, NormalizationStats, Split, SplitSpec,
    WindowSpec, CHANNELS,
};
use stdgrl_core::model::{Architecture, ModelConfig};
use stdgrl_core::train::TrainConfig;

use crate::error::CliError;

/// One experiment, read from a JSON file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.data = base.join(&config.data);
        config.output_dir = base.join(&config.output_dir);
        config.train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(config)
    }

    pub fn model_config(&self, num_nodes: usize) -> ModelConfig {
        ModelConfig::new(
            num_nodes,
            self.window.input_len,
            self.window.output_len,
            self.model.clone(),
            self.seed,
        )
    }

    /// Loads the data and derives windows, split and normalization.
    pub fn prepare(&self) -> Result<Prepared, CliError> {
        let dataset = load_flow_file(&self.data).map_err(|e| CliError::data(&self.data, e))?;
        let windows = make_windows(&dataset, self.window).map_err(|e| CliError::Validation(e.to_string()))?;
        let split =
            chronological_split(windows, &self.split, &dataset).map_err(|e| CliError::Validation(e.to_string()))?;
        let width = dataset.num_stations() * CHANNELS;
        let stats = zscore_fit(&dataset.flows.data()[..split.train_end() * width])
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(Prepared { dataset, split, stats })
    }
}

pub struct Prepared {
    pub dataset: FlowDataset,
    pub split: Split,
    pub stats: NormalizationStats,
}
