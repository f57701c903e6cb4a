use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregation, GroupSelection};
use crate::error::{Error, Result};
use crate::gradstore::GroupId;
use crate::influence::{DataInfConfig, Method, TilingPlan};
use crate::toytask::{DatasetSpec, ModelConfig, TrainConfig, HIDDEN_GROUPS};

/// Everything a sweep needs. Every field has a default, so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub noise_rate: f64,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub filter_fraction: f64,
    pub methods: Vec<Method>,
    pub aggregations: Vec<Aggregation>,
    pub groups: Vec<GroupSelection>,
    pub seeds: Vec<u64>,
    /// DataInf damping.
    pub lambda: f64,
    /// Votes per slice; unset means the number of samples filtered.
    pub vote_k: Option<usize>,
    /// Shared tokens kept by `TracInWE10`.
    pub top_k: usize,
    pub tiling: TilingPlan,
    /// Win fraction at which one configuration dominates another.
    pub pareto_threshold: f64,
}

/// `WE`, `G1`..`G4`, `CL`.
pub fn model_groups() -> Vec<GroupId> {
    let mut g = vec![GroupId::we()];
    g.extend((1..=HIDDEN_GROUPS).map(GroupId::hidden));
    g.push(GroupId::cl());
    g
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut groups: Vec<GroupSelection> = model_groups().into_iter().map(GroupSelection::Single).collect();
        groups.push(GroupSelection::All);
        PipelineConfig {
            dataset: DatasetSpec::default(),
            noise_rate: 0.2,
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            filter_fraction: 0.3,
            methods: Method::ALL.to_vec(),
            aggregations: Aggregation::ALL.to_vec(),
            groups,
            seeds: (0..10).collect(),
            lambda: DataInfConfig::DEFAULT_LAMBDA,
            vote_k: None,
            top_k: 10,
            tiling: TilingPlan::default(),
            pareto_threshold: 0.75,
        }
    }
}

fn unique<T: Ord + std::fmt::Debug>(what: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Config(format!("{what} must not be empty")));
    }
    let set: BTreeSet<&T> = items.iter().collect();
    if set.len() != items.len() {
        return Err(Error::Config(format!("{what} contains duplicates: {items:?}")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.dataset.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.training.validate().map_err(wrap)?;
        self.tiling.validate().map_err(wrap)?;
        for (name, v) in [("noise_rate", self.noise_rate), ("filter_fraction", self.filter_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        unique("seeds", &self.seeds)?;
        unique("methods", &self.methods)?;
        unique("aggregations", &self.aggregations)?;
        unique("groups", &self.groups)?;
        let known = model_groups();
        for g in &self.groups {
            if let GroupSelection::Single(id) = g {
                if !known.contains(id) {
                    return Err(Error::Config(format!("unknown group {id}; the model has {known:?}")));
                }
            }
        }
        DataInfConfig::new(self.lambda).map_err(wrap)?;
        if self.vote_k == Some(0) || self.top_k == 0 {
            return Err(Error::Config("vote_k and top_k must be at least 1".into()));
        }
        if !(self.pareto_threshold > 0.5 && self.pareto_threshold <= 1.0) {
            return Err(Error::Config("pareto_threshold must lie in (0.5, 1]".into()));
        }
        Ok(())
    }
}
