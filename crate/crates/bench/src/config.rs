//! Experiment configuration, read from JSON.

use std::path::Path;

use ifss_core::eaus::{UpdateKind, UpdateScope, UpdateStrategy, UpdateTarget};
use ifss_core::numkit::{ActKind, LrSchedule, OptimizerKind};
use ifss_core::pipeline::{EmbeddingUse, LearnConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::schedule::ScheduleSpec;
use crate::taxonomy::TaxonomySpec;
use crate::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "IFSS_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    NonUpdate,
    Lt,
    Eaus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Base,
    New,
    Both,
}

/// How an embedding takes part in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Replaced by zeros everywhere.
    Removed,
    /// Used but never moved by the update strategy.
    Kept,
    /// Used and moved by the update strategy.
    Updated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub scope: Scope,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Eaus,
            scope: Scope::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub hyper: Role,
    pub category: Role,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            hyper: Role::Kept,
            category: Role::Updated,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub initial: f64,
    pub gamma: f64,
    pub every: usize,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            initial: 2e-3,
            gamma: 0.9,
            every: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: vec![8, 16],
            hidden: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub episodes_per_epoch: usize,
    pub pseudo_new: usize,
    pub max_rounds: usize,
    pub queries: usize,
    pub negatives: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            episodes_per_epoch: t.episodes_per_epoch,
            pseudo_new: t.pseudo_new,
            max_rounds: t.max_rounds,
            queries: t.queries,
            negatives: t.negatives,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub repeats: usize,
    pub embed_dim: usize,
    /// Hyper-class clusters K.
    pub clusters: usize,
    pub kmeans_restarts: usize,
    /// CASM refinement iterations T.
    pub iterations: usize,
    pub tau: f64,
    pub shots: usize,
    pub epochs: usize,
    pub lr: LrConfig,
    pub strategy: StrategyConfig,
    pub embeddings: EmbeddingConfig,
    pub model: ModelSection,
    pub episodes: EpisodeConfig,
    pub taxonomy: TaxonomySpec,
    pub schedule: ScheduleSpec,
    /// Record per-frame wall-clock time in reports. Off by default so that
    /// reports are reproducible byte for byte.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            repeats: 10,
            embed_dim: 8,
            clusters: 3,
            kmeans_restarts: 10,
            iterations: ifss_core::casm::DEFAULT_ITERATIONS,
            tau: ifss_core::casm::DEFAULT_TAU,
            shots: 1,
            epochs: 60,
            lr: LrConfig::default(),
            strategy: StrategyConfig::default(),
            embeddings: EmbeddingConfig::default(),
            model: ModelSection::default(),
            episodes: EpisodeConfig::default(),
            taxonomy: TaxonomySpec::default(),
            schedule: ScheduleSpec::default(),
            timing: false,
        }
    }
}

fn invalid(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Replaces the seed with the value of `IFSS_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v.trim().parse().map_err(|_| invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(invalid(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        let positive = [
            ("repeats", self.repeats),
            ("embed_dim", self.embed_dim),
            ("clusters", self.clusters),
            ("kmeans_restarts", self.kmeans_restarts),
            ("shots", self.shots),
            ("epochs", self.epochs),
            ("model.hidden", self.model.hidden),
            ("episodes.episodes_per_epoch", self.episodes.episodes_per_epoch),
            ("episodes.max_rounds", self.episodes.max_rounds),
            ("episodes.queries", self.episodes.queries),
            ("schedule.base_support", self.schedule.base_support),
            ("schedule.queries_per_class", self.schedule.queries_per_class),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return Err(invalid("model.widths must be a non-empty list of positive widths"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid("tau must lie strictly between 0 and 1"));
        }
        if !(self.lr.initial > 0.0 && self.lr.gamma > 0.0 && self.lr.initial.is_finite() && self.lr.gamma.is_finite()) {
            return Err(invalid("lr.initial and lr.gamma must be positive"));
        }
        if self.clusters > self.schedule.base_classes {
            return Err(invalid("clusters cannot exceed schedule.base_classes"));
        }
        if self.episodes.pseudo_new >= self.schedule.base_classes {
            return Err(invalid("episodes.pseudo_new must leave at least one pseudo-base class"));
        }
        if self.embeddings.hyper == Role::Removed && self.embeddings.category == Role::Removed {
            return Err(invalid("at least one embedding must stay in use"));
        }
        let image = self.taxonomy.image_size;
        let stride = 1usize << self.model.widths.len();
        if !image.is_multiple_of(stride) {
            return Err(invalid(format!("image size {image} is not divisible by the feature stride {stride}")));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_channels: 3,
            widths: self.model.widths.clone(),
            embed_dim: self.embed_dim,
            hidden: self.model.hidden,
            iterations: self.iterations,
            act: ActKind::Silu,
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            shots: self.shots,
            ..self.schedule.clone()
        }
    }

    /// Update strategy implied by the strategy and embedding settings. The
    /// strategy moves exactly the embeddings marked `updated`; with none
    /// marked it is a non-update.
    pub fn update_strategy(&self) -> UpdateStrategy {
        let kind = match self.strategy.kind {
            StrategyKind::NonUpdate => UpdateKind::NonUpdate,
            StrategyKind::Lt => UpdateKind::LinearTransform,
            StrategyKind::Eaus => UpdateKind::Eaus,
        };
        let scope = match self.strategy.scope {
            Scope::Base => UpdateScope::BaseOnly,
            Scope::New => UpdateScope::NewOnly,
            Scope::Both => UpdateScope::Both,
        };
        let (h, c) = (self.embeddings.hyper == Role::Updated, self.embeddings.category == Role::Updated);
        let (kind, target) = match (h, c) {
            (true, true) => (kind, UpdateTarget::Both),
            (true, false) => (kind, UpdateTarget::Hyper),
            (false, true) => (kind, UpdateTarget::Category),
            (false, false) => (UpdateKind::NonUpdate, UpdateTarget::Category),
        };
        UpdateStrategy { kind, scope, target }
    }

    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig {
            clusters: self.clusters,
            restarts: self.kmeans_restarts,
            cluster_seed: self.seed,
            tau: self.tau,
            strategy: self.update_strategy(),
            embeddings: EmbeddingUse {
                hyper: self.embeddings.hyper != Role::Removed,
                category: self.embeddings.category != Role::Removed,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            episodes_per_epoch: self.episodes.episodes_per_epoch,
            optimizer: OptimizerKind::ADAM,
            schedule: LrSchedule {
                initial: self.lr.initial,
                gamma: self.lr.gamma,
                every: self.lr.every,
            },
            pseudo_new: self.episodes.pseudo_new,
            max_rounds: self.episodes.max_rounds,
            queries: self.episodes.queries,
            negatives: self.episodes.negatives,
        }
    }
}
