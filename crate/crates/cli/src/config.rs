//! The run configuration shared by every pipeline command.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use noah_core::backbone::ModelConfig;
use noah_core::evolution::EvolutionSchedule;
use noah_core::search_space::{PerModule, SearchSpaceSpec};
use noah_core::training::OptimHyper;
use noah_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Downstream dataset directory (train/val splits).
    pub dataset: Option<PathBuf>,
    /// Dataset used by `pretrain-backbone`.
    pub pretrain_dataset: Option<PathBuf>,
    /// Backbone checkpoint; a randomly initialized backbone is used when absent.
    pub backbone: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            pretrain_dataset: None,
            backbone: None,
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub backbone_init: u64,
    pub pretrain: u64,
    pub supernet: u64,
    pub evolve: u64,
    pub retrain: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            backbone_init: 0,
            pretrain: 1,
            supernet: 2,
            evolve: 3,
            retrain: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub depth_choices: Vec<usize>,
    pub dim_choices: PerModule<Vec<usize>>,
    pub budget: usize,
    pub budget_includes_head: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            depth_choices: vec![1, 2, 3, 4],
            dim_choices: PerModule::from_fn(|_| vec![1, 5, 10]),
            budget: 1532,
            budget_includes_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub seeds: Seeds,
    pub search: SearchConfig,
    pub pretrain: OptimHyper,
    pub supernet: OptimHyper,
    pub retrain: OptimHyper,
    pub evolution: EvolutionSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            seeds: Seeds::default(),
            search: SearchConfig::default(),
            pretrain: OptimHyper {
                epochs: 20,
                warmup_epochs: 2,
                ..OptimHyper::default()
            },
            supernet: OptimHyper::supernet(),
            retrain: OptimHyper::default(),
            evolution: EvolutionSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.check().map_err(Error::Config)?;
        self.space().check()?;
        for (name, hyper) in [("pretrain", &self.pretrain), ("supernet", &self.supernet), ("retrain", &self.retrain)] {
            hyper.check().map_err(|e| Error::Config(format!("[{name}] {e}")))?;
        }
        self.evolution.check()?;
        Ok(())
    }

    pub fn space(&self) -> SearchSpaceSpec {
        SearchSpaceSpec {
            num_layers: self.model.backbone.num_layers,
            depth_choices: self.search.depth_choices.clone(),
            dim_choices: self.search.dim_choices.clone(),
            budget: self.search.budget,
            budget_includes_head: self.search.budget_includes_head,
            dims: self.model.param_dims(),
        }
    }

    /// Defaults filled in, as TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
