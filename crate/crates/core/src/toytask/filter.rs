use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregation, GroupSelection, ScoreTable};
use crate::error::{Error, Result};
use crate::gradstore::SampleId;
use crate::influence::Method;

use super::dataset::TokenDataset;
use super::model::ToyModel;
use super::train::{evaluate, train_from, TrainConfig};

/// Label of a sweep configuration, e.g. `TracIn/Mean/CL`, or a baseline name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigId(pub String);

impl ConfigId {
    pub const RANDOM: &'static str = "Random";
    pub const FULL: &'static str = "Full";

    pub fn new(method: Method, aggregation: Aggregation, groups: &GroupSelection) -> Self {
        ConfigId(format!("{method}/{aggregation}/{groups}"))
    }

    pub fn random() -> Self {
        ConfigId(Self::RANDOM.into())
    }

    pub fn full() -> Self {
        ConfigId(Self::FULL.into())
    }

    pub fn is_baseline(&self) -> bool {
        self.0 == Self::RANDOM || self.0 == Self::FULL
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ConfigId,
    pub dataset: String,
    pub seed: u64,
    /// Best test accuracy over the retraining epochs.
    pub best_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub result: RunResult,
    pub removed: BTreeSet<SampleId>,
    /// Classes left without any training sample.
    pub emptied_classes: Vec<usize>,
}

/// Number of samples removed when filtering `fraction` of `n`.
pub fn removal_count(fraction: f64, n: usize) -> usize {
    // The epsilon keeps e.g. 0.3 * 10 from flooring to 2.
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// The `count` lowest-scoring ids, ties broken by ascending id.
pub fn lowest_scoring(scores: &ScoreTable, count: usize) -> Vec<SampleId> {
    scores.ascending().into_iter().take(count).collect()
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("filter fraction {fraction} outside (0, 1)")));
    }
    Ok(())
}

/// Retrains from `init` without the `removed` training samples and returns
/// the best test accuracy seen after any epoch.
pub fn retrain_without(
    dataset: &TokenDataset,
    init: &ToyModel,
    removed: &BTreeSet<SampleId>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let kept = dataset.without_train(removed);
    let series = train_from(init.clone(), &kept.train, &kept.validation, cfg, seed)?;
    let mut best = f64::NEG_INFINITY;
    for c in &series.snapshots {
        best = best.max(evaluate(&c.model, &kept.test)?.1);
    }
    Ok(best)
}

fn emptied_classes(dataset: &TokenDataset, removed: &BTreeSet<SampleId>) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = (0..dataset.num_classes).map(|c| (c, 0)).collect();
    for s in dataset.train.iter().filter(|s| !removed.contains(&s.id)) {
        *counts.entry(s.label).or_default() += 1;
    }
    counts.into_iter().filter(|&(_, n)| n == 0).map(|(c, _)| c).collect()
}

/// Removes the lowest-scoring `fraction` of the training set and retrains
/// from the same initialization with the same hyperparameters.
pub fn filter_and_retrain(
    dataset: &TokenDataset,
    init: &ToyModel,
    scores: &ScoreTable,
    config: ConfigId,
    fraction: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FilterOutcome> {
    check_fraction(fraction)?;
    let train_ids: BTreeSet<SampleId> = dataset.train.iter().map(|s| s.id).collect();
    if scores.scores.len() != train_ids.len() || scores.scores.keys().any(|id| !train_ids.contains(id)) {
        return Err(Error::invalid("score table does not cover the training split exactly"));
    }
    let removed: BTreeSet<SampleId> = lowest_scoring(scores, removal_count(fraction, train_ids.len()))
        .into_iter()
        .collect();
    remove_and_retrain(dataset, init, removed, config, cfg, seed)
}

/// Retrains without an explicit removal set (used by the baselines).
pub fn remove_and_retrain(
    dataset: &TokenDataset,
    init: &ToyModel,
    removed: BTreeSet<SampleId>,
    config: ConfigId,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FilterOutcome> {
    let emptied = emptied_classes(dataset, &removed);
    if !emptied.is_empty() {
        log::warn!("{config}: filtering removed every training sample of classes {emptied:?}");
    }
    let best_test_accuracy = retrain_without(dataset, init, &removed, cfg, seed)?;
    Ok(FilterOutcome {
        result: RunResult {
            config,
            dataset: dataset.name.clone(),
            seed,
            best_test_accuracy,
        },
        removed,
        emptied_classes: emptied,
    })
}
