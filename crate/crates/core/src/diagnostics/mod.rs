//! Evaluation metrics: gradient cancellation, noise detection rate, rank
//! correlation and the pairwise win-rate tournament.

mod cancellation;
mod ndr;
mod spearman;
mod tournament;

pub use cancellation::{group_cancellation, per_parameter_cancellation, per_parameter_values, CancellationStats};
pub use ndr::{ndr, ndr_curve_auc, NdrReport};
pub use spearman::{average_ranks, spearman, Spearman, SIGNIFICANCE_LEVEL};
pub use tournament::{pareto_ranks, win_matrix, WinMatrix};
