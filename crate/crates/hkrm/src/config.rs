//! The declarative run-config file.
//!
//! A single TOML document covers world, model, graph-building and training
//! settings plus the root seed. Every field has a default, so an empty file
//! parses to the documented default configuration; unknown keys are
//! rejected. Validation runs before any compute and names the offending
//! dotted key.

use crate::error::{Error, Result};
use crate::explicit::ExplicitConfig;
use crate::graphs::AttributeEdgeMode;
use crate::implicit::ImplicitConfig;
use crate::optim::SgdConfig;
use crate::world::WorldConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphBuildConfig {
    /// How attribute divergences become edge weights.
    pub attribute_mode: AttributeEdgeMode,
    /// Keep only the top-K most frequent attributes when inferring a
    /// vocabulary; 0 keeps all.
    pub top_attributes: usize,
    pub top_predicates: usize,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig {
            attribute_mode: AttributeEdgeMode::Divergence,
            top_attributes: 0,
            top_predicates: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Baseline pretraining epochs (feature head only).
    pub epochs_phase1: usize,
    /// Epochs with the knowledge branches enabled.
    pub epochs_phase2: usize,
    pub steps_per_epoch: usize,
    /// Scenes whose gradients are averaged per SGD step.
    pub scenes_per_step: usize,
    /// Scenes sampled to build the annotation corpus the priors are
    /// rebuilt from.
    pub annotation_scenes: usize,
    /// Held-out scenes evaluated after every epoch.
    pub eval_scenes: usize,
    pub sgd: SgdConfig,
    /// Weight of the edge-supervision losses in the total objective.
    pub lambda_edge: f64,
    /// Multiply the learning rate by this factor every `lr_decay_every`
    /// epochs (0 disables).
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Debug aid: reuse one scene seed for every training step.
    pub fixed_scene_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 4,
            epochs_phase2: 8,
            steps_per_epoch: 50,
            scenes_per_step: 4,
            annotation_scenes: 300,
            eval_scenes: 100,
            sgd: SgdConfig::default(),
            lambda_edge: 1.0,
            lr_decay_factor: 1.0,
            lr_decay_every: 0,
            fixed_scene_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, key_prefix: &str) -> Result<()> {
        let err = |key: &str, msg: String| Err(Error::config(format!("{key_prefix}.{key}"), msg));
        if self.epochs_phase1 + self.epochs_phase2 == 0 {
            return err("epochs_phase1", "at least one epoch across both phases".into());
        }
        if self.steps_per_epoch == 0 {
            return err("steps_per_epoch", "must be positive".into());
        }
        if self.scenes_per_step == 0 {
            return err("scenes_per_step", "must be positive".into());
        }
        if self.annotation_scenes == 0 {
            return err("annotation_scenes", "must be positive".into());
        }
        if self.eval_scenes == 0 {
            return err("eval_scenes", "must be positive".into());
        }
        self.sgd.validate(&format!("{key_prefix}.sgd"))?;
        if !(self.lambda_edge >= 0.0) || !self.lambda_edge.is_finite() {
            return err("lambda_edge", format!("must be nonnegative, got {}", self.lambda_edge));
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_factor > 1.0 {
            return err(
                "lr_decay_factor",
                format!("must be in (0,1], got {}", self.lr_decay_factor),
            );
        }
        Ok(())
    }
}

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// Shared settings for both explicit branches.
    pub explicit: ExplicitConfig,
    pub implicit: ImplicitConfig,
    pub graphs: GraphBuildConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate("world")?;
        self.explicit.validate("explicit")?;
        self.implicit.validate("implicit")?;
        self.train.validate("train")?;
        Ok(())
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
        key: "<config>".into(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Canonical TOML rendering; `parse(normalize(cfg)) == cfg`.
pub fn normalized_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}
