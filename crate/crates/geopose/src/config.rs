//! Experiment configuration: one JSON document, every field optional, with
//! command-line flags applied on top.

use std::path::Path;

use geopose_core::data::{builtin_model, SceneConfig};
use geopose_core::model::{BlockKind, ModelConfig, Switch};
use geopose_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives weight init, batch order and augmentation. Data generation has
    /// its own `scene.seed` so several training seeds can share a dataset.
    pub seed: u64,
    /// Built-in object model used by `gen-data`.
    pub model: String,
    pub scene: SceneConfig,
    pub network: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: "Lbracket".into(),
            scene: SceneConfig::default(),
            network: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<String>,
    pub data_seed: Option<u64>,
    pub train_samples: Option<usize>,
    pub val_samples: Option<usize>,
    pub noise: Option<f64>,
    pub cull: Option<f64>,
    pub occluder: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub gcn_block: Option<BlockKind>,
    pub geometry_aware: Option<Switch>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// File (or defaults) plus overrides, validated.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut self.seed, &o.seed);
        set(&mut self.model, &o.model);
        set(&mut self.scene.seed, &o.data_seed);
        set(&mut self.scene.train_samples, &o.train_samples);
        set(&mut self.scene.val_samples, &o.val_samples);
        set(&mut self.scene.noise_sigma, &o.noise);
        set(&mut self.scene.cull_fraction, &o.cull);
        set(&mut self.scene.occluder_fraction, &o.occluder);
        set(&mut self.train.steps, &o.steps);
        set(&mut self.train.batch, &o.batch);
        set(&mut self.train.lr, &o.lr);
        set(&mut self.network.gcn_block, &o.gcn_block);
        set(&mut self.network.geometry_aware, &o.geometry_aware);
    }

    /// Checks every section before any compute starts.
    pub fn validate(&self) -> Result<()> {
        builtin_model(&self.model).map_err(|e| Error::Config(e.to_string()))?;
        let wrap = |e: geopose_core::Error| Error::Config(e.to_string());
        self.scene.validate().map_err(wrap)?;
        self.network.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        Ok(())
    }
}
