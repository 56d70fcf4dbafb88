use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Model, MCGM_PREFIX};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Which model a run trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Backbone plus the cluster module.
    #[default]
    Mcgm,
    /// Plain backbone, no cluster parameters at all.
    Baseline,
    /// Cluster module present but zeroed and frozen.
    Frozen,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mcgm => "mcgm",
            Variant::Baseline => "baseline",
            Variant::Frozen => "frozen",
        }
    }
}

/// Everything `mcgm train` needs. Unknown keys are rejected.
///
/// ```json
/// {
///   "model": { "hidden_dim": 32, "atom_cutoff": 3.0 },
///   "train": { "lr": 0.001, "max_epochs": 100, "seeds": [0, 1, 2],
///              "cluster": { "strategy": "kmeanspp" } },
///   "variant": "mcgm",
///   "data_dir": "data",
///   "out_dir": "runs/mcgm"
/// }
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Freshly initialized model of this run's variant.
    pub fn model_for(&self, seed: u64) -> Result<Model> {
        let config = BackboneConfig {
            mcgm: self.variant != Variant::Baseline,
            ..self.model.clone()
        };
        let mut model = Model::new(config, seed)?;
        if self.variant == Variant::Frozen {
            model.params.zero_and_freeze(MCGM_PREFIX);
        }
        Ok(model)
    }
}
