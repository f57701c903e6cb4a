use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::dataset::{Sample, TokenDataset};
use super::model::{ModelConfig, ToyModel};

/// Plain minibatch SGD with a fixed learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.5,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// 0-based epoch after which the snapshot was taken.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub model: ToyModel,
}

impl Checkpoint {
    pub fn id(&self) -> String {
        format!("epoch-{}", self.epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSeries {
    pub snapshots: Vec<Checkpoint>,
}

impl CheckpointSeries {
    pub fn validation_losses(&self) -> Vec<f64> {
        self.snapshots.iter().map(|c| c.validation_loss).collect()
    }
}

/// Mean loss and accuracy of `model` on `samples`.
pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        loss += model.loss(&s.tokens, s.label)?;
        correct += usize::from(model.predict_one(&s.tokens)? == s.label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn predict(model: &ToyModel, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.iter().map(|s| model.predict_one(&s.tokens)).collect()
}

/// Stage-1 initialization for a run seed.
pub fn initial_model(dataset: &TokenDataset, model_cfg: &ModelConfig, seed: u64) -> Result<ToyModel> {
    ToyModel::init(dataset.vocab_size, dataset.num_classes, model_cfg, seed)
}

/// Initializes from `seed` and trains on the dataset's training split,
/// snapshotting after every epoch.
pub fn train(
    dataset: &TokenDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<CheckpointSeries> {
    let init = initial_model(dataset, model_cfg, seed)?;
    train_from(init, &dataset.train, &dataset.validation, train_cfg, seed)
}

pub fn train_from(
    init: ToyModel,
    train_set: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<CheckpointSeries> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let mut rng = seed::rng(seed, "batch-order");
    let mut model = init;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = model.batch_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            if cfg.learning_rate != 0.0 {
                model.params.axpy(-cfg.learning_rate, &grad);
            }
        }
        if !model.params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let (validation_loss, validation_accuracy) = evaluate(&model, validation)?;
        if !validation_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        snapshots.push(Checkpoint {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            validation_loss,
            validation_accuracy,
            model: model.clone(),
        });
    }
    Ok(CheckpointSeries { snapshots })
}

/// Snapshot with the lowest validation loss; the earliest epoch wins ties.
pub fn select_checkpoint(series: &CheckpointSeries) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for c in &series.snapshots {
        if best.is_none_or(|b| c.validation_loss < b.validation_loss) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::Empty("checkpoint series".into()))
}
