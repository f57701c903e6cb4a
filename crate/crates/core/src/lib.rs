//! Layer-wise training-data influence: per-sample gradient dumps, influence
//! kernels and a tiled engine, score aggregation, evaluation metrics, and a
//! noisy-label filtering pipeline on a built-in toy classifier.

pub mod aggregate;
pub mod diagnostics;
mod error;
pub(crate) mod floats;
pub mod gradstore;
pub mod influence;
pub mod pipeline;
pub mod seed;
pub mod theory;
pub mod toytask;

pub use aggregate::{Aggregation, GroupSelection, ScoreTable, ValidationMask};
pub use error::{Error, Result};
pub use gradstore::{GradientBlock, GradientStore, GroupId, Manifest, SampleId, Split};
pub use influence::{DataInfConfig, InfluenceTensor, Method, TilingPlan};
pub use pipeline::{PipelineConfig, ReportBundle};
pub use toytask::{ConfigId, NoiseMask, RunResult, TokenDataset};
