//! TOML experiment configuration.
//!
//! Every key is optional and unknown keys are rejected. A minimal file:
//!
//! ```toml
//! [dataset]
//! kind = "circles"
//! n = 2000
//!
//! [prune]
//! rounds = 10
//! x = 0.2
//! ```
//!
//! Defaults: 2000 circles (noise 0.1, seed 0), 25% held out; a 2-stage x
//! 2-block residual MLP of width 64 with ReLU; 10 epochs of SGD (batch 32,
//! learning rate 0.05, momentum 0.9) rewinding to 10% of training; 10 global
//! rounds removing 20% of the remaining weights.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_blobs, gen_circles, load_idx, Dataset};
use crate::error::{Error, FormatError, Result};
use crate::imp::{ImpOptions, PruneMode, PruneSchedule, PruneScope, RefinePolicy};
use crate::nn::{Activation, NetworkSpec, StageSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Circles,
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    /// Radial noise for circles.
    pub noise: f64,
    /// Blob centers; defaults to three points in the plane.
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    /// IDX image and label files, relative to the config file.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub holdout_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Circles,
            n: 2000,
            seed: 0,
            noise: 0.1,
            centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.5]],
            spread: 0.6,
            images: None,
            labels: None,
            holdout_fraction: 0.25,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Inferred from the dataset when absent.
    pub input_dim: Option<usize>,
    pub output_dim: Option<usize>,
    pub stages: Vec<StageSpec>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: None,
            output_dim: None,
            stages: vec![
                StageSpec { block_count: 2, width: 64 },
                StageSpec { block_count: 2, width: 64 },
            ],
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    FractionOfRemaining,
    FractionOfOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub mode: ModeName,
    /// `x` for fraction_of_remaining, `x0` for fraction_of_original.
    pub x: f64,
    pub scope: PruneScope,
    pub rounds: usize,
    pub policy: RefinePolicy,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            mode: ModeName::FractionOfRemaining,
            x: 0.2,
            scope: PruneScope::Global,
            rounds: 10,
            policy: RefinePolicy::Rewind,
        }
    }
}

impl PruneConfig {
    pub fn schedule(&self) -> PruneSchedule {
        let mode = match self.mode {
            ModeName::FractionOfRemaining => PruneMode::FractionOfRemaining(self.x),
            ModeName::FractionOfOriginal => PruneMode::FractionOfOriginal(self.x),
        };
        PruneSchedule {
            mode,
            scope: self.scope,
            rounds: self.rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Output directory; relative paths resolve against the output root.
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: None,
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Errors carry the line and column of the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let place = e
                .span()
                .map(|span| {
                    let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}: ")
                })
                .unwrap_or_default();
            FormatError::Malformed(format!("config {place}{}", e.message())).into()
        })
    }

    /// Reads a config file; relative IDX paths are resolved against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Format(FormatError::Malformed(m)) => {
                FormatError::Malformed(format!("{}: {m}", path.display())).into()
            }
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.dataset.images, &mut config.dataset.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FormatError::Malformed(format!("cannot encode config: {e}")).into())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Circles => gen_circles(d.n, d.noise, d.seed),
            DatasetKind::Blobs => gen_blobs(d.n, &d.centers, d.spread, d.seed),
            DatasetKind::Idx => match (&d.images, &d.labels) {
                (Some(images), Some(labels)) => load_idx(images, labels),
                _ => Err(Error::Argument("idx datasets need `images` and `labels` paths".into())),
            },
        }
    }

    pub fn network_spec(&self, dataset: &Dataset) -> Result<NetworkSpec> {
        let n = &self.network;
        NetworkSpec::new(
            n.input_dim.unwrap_or(dataset.features.cols()),
            n.output_dim.unwrap_or(dataset.class_count),
            n.stages.clone(),
            n.activation,
        )
    }

    pub fn imp_options(&self) -> ImpOptions {
        ImpOptions {
            model_name: self.name.clone(),
            init_seed: self.network.init_seed,
            split_seed: self.dataset.split_seed,
            holdout_fraction: self.dataset.holdout_fraction,
            policy: self.prune.policy,
        }
    }
}
