//! Desk-scale stand-in for fine-tuning: synthetic token classification, a
//! small classifier with hand-written backprop, and filter-and-retrain.

mod dataset;
mod filter;
mod grads;
mod model;
mod train;

pub use dataset::{
    generate_dataset, inject_label_noise, read_jsonl, token_class, write_jsonl, DatasetSpec, NoiseMask, Sample,
    SplitSizes, TokenDataset, CLS_TOKEN,
};
pub use filter::{
    filter_and_retrain, lowest_scoring, removal_count, remove_and_retrain, retrain_without, ConfigId, FilterOutcome,
    RunResult,
};
pub use grads::{flatten_group, per_sample_gradients, GradientRequest};
pub use model::{Dense, ModelConfig, Parameters, ToyModel, HIDDEN_GROUPS};
pub use train::{
    evaluate, initial_model, predict, select_checkpoint, train, train_from, Checkpoint, CheckpointSeries, TrainConfig,
};
