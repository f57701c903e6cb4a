use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstore::{GradientBlock, GroupId};

/// Per-parameter cancellation of one group, summarized over its finite
/// entries, plus the group-level ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancellationStats {
    pub group: GroupId,
    pub num_parameters: usize,
    /// `None` when every parameter cancels exactly.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub fraction_infinite: f64,
    /// Parameters with no gradient at all, which are scored 1.
    pub fraction_no_signal: f64,
    #[serde(with = "crate::floats")]
    pub group_value: f64,
}

fn non_empty(block: &GradientBlock) -> Result<()> {
    if block.num_samples() == 0 {
        return Err(Error::Empty(format!("gradient block {}", block.group())));
    }
    Ok(())
}

/// `Σ_x |g_x(θ)| / |Σ_x g_x(θ)|` for every flat parameter θ.
///
/// Infinite when the gradients cancel exactly; 1 when they are all zero.
pub fn per_parameter_values(block: &GradientBlock) -> Result<Vec<f64>> {
    non_empty(block)?;
    let dim = block.dim();
    let mut abs = vec![0.0f64; dim];
    let mut sum = vec![0.0f64; dim];
    for row in block.rows() {
        for (p, &v) in row.iter().enumerate() {
            abs[p] += f64::from(v).abs();
            sum[p] += f64::from(v);
        }
    }
    Ok(abs
        .into_iter()
        .zip(sum)
        .map(|(num, den)| {
            let den = den.abs();
            if num == 0.0 {
                1.0
            } else if den == 0.0 {
                f64::INFINITY
            } else {
                num / den
            }
        })
        .collect())
}

pub fn per_parameter_cancellation(block: &GradientBlock) -> Result<CancellationStats> {
    let values = per_parameter_values(block)?;
    let no_signal = no_signal_count(block);
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let (mean, std, median) = if finite.is_empty() {
        (None, None, None)
    } else {
        let m = finite.iter().sum::<f64>() / finite.len() as f64;
        let var = finite.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / finite.len() as f64;
        let mid = finite.len() / 2;
        let median = if finite.len() % 2 == 1 {
            finite[mid]
        } else {
            (finite[mid - 1] + finite[mid]) / 2.0
        };
        (Some(m), Some(var.sqrt()), Some(median))
    };
    Ok(CancellationStats {
        group: block.group().clone(),
        num_parameters: values.len(),
        mean,
        std,
        median,
        min: finite.first().copied(),
        max: finite.last().copied(),
        fraction_infinite: (values.len() - finite.len()) as f64 / n,
        fraction_no_signal: no_signal as f64 / n,
        group_value: group_cancellation(block)?,
    })
}

fn no_signal_count(block: &GradientBlock) -> usize {
    (0..block.dim())
        .filter(|&p| block.rows().all(|r| r[p] == 0.0))
        .count()
}

/// `Σ_x ‖g_x‖ / ‖Σ_x g_x‖`; infinite when the summed gradient vanishes.
pub fn group_cancellation(block: &GradientBlock) -> Result<f64> {
    non_empty(block)?;
    let mut total = vec![0.0f64; block.dim()];
    let mut norms = 0.0;
    for row in block.rows() {
        let mut sq = 0.0;
        for (t, &v) in total.iter_mut().zip(row) {
            let v = f64::from(v);
            *t += v;
            sq += v * v;
        }
        norms += sq.sqrt();
    }
    let denom = total.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        Ok(if norms == 0.0 { 1.0 } else { f64::INFINITY })
    } else {
        // Square roots can round a codirectional block a hair under 1.
        Ok((norms / denom).max(1.0))
    }
}
