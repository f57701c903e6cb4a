//! The five-stage sweep: noise injection, training and checkpoint
//! selection, per-sample gradients and influence, aggregation, and
//! filter-and-retrain, plus the Random and Full baselines.

mod config;
mod report;
mod run;

pub use config::{model_groups, PipelineConfig};
pub use report::{
    emit_reports, summary_text, CancellationRow, CorrelationRecord, ReportBundle, SummaryRow, REPORT_FILE,
    SCORES_DIR, SUMMARY_FILE,
};
pub use run::{
    full_removal, random_removal, run_pipeline, run_pipeline_with, sweep_grid, CellRecord, CellStatus,
    CheckpointSummary, PipelineHooks, ScoreHook, SeedArtifacts, SeedRecord,
};
