//! Experiment configuration: a strict JSON schema with the training protocol
//! defaults baked in (T = 4 blocks, k = 16, 100 epochs, batches of 16,
//! Adam at 1e-4 halved every 20 epochs, 3 seeds).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_dataset, DatasetError, DatasetSplit};
use crate::model::{GraphMode, ModelDims, ModelWidths};
use crate::synth::{generate_synthetic, SynthError, SyntheticSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Where the clouds come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A directory tree of OFF meshes, `root/<class>/{train,test}/*.off`.
    OffDir {
        root: PathBuf,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    /// The generated cube/sphere/torus dataset.
    Synthetic {
        clouds_per_class: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_rotations")]
        rotations: bool,
    },
}

fn default_t_blocks() -> usize {
    4
}
fn default_k() -> usize {
    16
}
fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    16
}
fn default_lr0() -> f64 {
    1e-4
}
fn default_lr_halving_period() -> usize {
    20
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_n_points() -> usize {
    1024
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_rotations() -> bool {
    true
}

/// One experiment: model shape, optimization protocol, data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: GraphMode,
    pub d_graph: usize,
    pub dataset: DatasetConfig,
    #[serde(default = "default_t_blocks")]
    pub t_blocks: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_halving_period")]
    pub lr_halving_period: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default)]
    pub widths: ModelWidths,
    /// Stop a run early once validation accuracy (percent) reaches this
    /// value; the usual best-epoch selection still applies.
    #[serde(default)]
    pub early_stop_val_acc: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            (self.t_blocks, "t_blocks"),
            (self.k, "k"),
            (self.epochs, "epochs"),
            (self.batch_size, "batch_size"),
            (self.lr_halving_period, "lr_halving_period"),
            (self.d_graph, "d_graph"),
        ];
        for (value, name) in positive {
            if value == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.mode == GraphMode::Baseline && self.d_graph != 3 {
            return Err(ConfigError::Invalid(format!(
                "baseline mode requires d_graph = 3, got {}",
                self.d_graph
            )));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(ConfigError::Invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return Err(ConfigError::Invalid(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must not be empty".into()));
        }
        if self.n_points <= self.k {
            return Err(ConfigError::Invalid(format!(
                "n_points ({}) must exceed k ({})",
                self.n_points, self.k
            )));
        }
        Ok(())
    }

    /// The architecture this config describes, given the dataset's class
    /// count and per-point input width.
    pub fn model_dims(&self, d_in: usize, d_classes: usize) -> ModelDims {
        ModelDims {
            mode: self.mode,
            d_in,
            d_graph: self.d_graph,
            d_classes,
            t_blocks: self.t_blocks,
            k: self.k,
            widths: self.widths,
        }
    }

    /// Load or generate the dataset this config points at.
    pub fn load_split(&self) -> Result<DatasetSplit, ConfigError> {
        match &self.dataset {
            DatasetConfig::OffDir { root, val_fraction } => {
                Ok(load_dataset(root, self.n_points, *val_fraction, dataset_master_seed(self))?)
            }
            DatasetConfig::Synthetic {
                clouds_per_class,
                test_fraction,
                val_fraction,
                seed,
                rotations,
            } => Ok(generate_synthetic(&SyntheticSpec {
                clouds_per_class: *clouds_per_class,
                n_points: self.n_points,
                test_fraction: *test_fraction,
                val_fraction: *val_fraction,
                seed: *seed,
                rotations: *rotations,
            })?),
        }
    }
}

/// The dataset's sampling seed is deliberately independent of the per-run
/// training seeds, so all seeds of one experiment see identical data.
fn dataset_master_seed(config: &ExperimentConfig) -> u64 {
    match &config.dataset {
        DatasetConfig::OffDir { .. } => 0x706f696e74,
        DatasetConfig::Synthetic { seed, .. } => *seed,
    }
}

/// Read and validate a config file. Error messages carry the file path and,
/// for schema violations, the offending field.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text =
        fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|source| ConfigError::Parse { path: path.into(), source })?;
    config.validate()?;
    Ok(config)
}

/// Write a config next to an artifact (pretty JSON, round-trips exactly).
pub fn save_config(path: &Path, config: &ExperimentConfig) -> Result<(), ConfigError> {
    let json = serde_json::to_string_pretty(config)
        .map_err(|source| ConfigError::Parse { path: path.into(), source })?;
    fs::write(path, json).map_err(|source| ConfigError::Io { path: path.into(), source })
}
