//! Pairwise influence kernels on flattened gradients.
//!
//! All reductions accumulate in f64, left to right.

use crate::error::{Error, Result};
use crate::gradstore::GradientBlock;

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + f64::from(x) * f64::from(y))
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// First-order influence: the inner product of the two gradients.
pub fn tracin(g_val: &[f32], g_train: &[f32]) -> Result<f64> {
    same_len(g_val, g_train)?;
    Ok(dot(g_val, g_train))
}

/// `tracin` on double-precision gradients.
pub fn tracin_f64(g_val: &[f64], g_train: &[f64]) -> Result<f64> {
    if g_val.len() != g_train.len() {
        return Err(Error::DimensionMismatch {
            expected: g_val.len(),
            actual: g_train.len(),
        });
    }
    Ok(g_val.iter().zip(g_train).fold(0.0, |acc, (x, y)| acc + x * y))
}

pub(crate) fn cosine_from_parts(dot: f64, norm_val: f64, norm_train: f64) -> Option<f64> {
    if norm_val == 0.0 || norm_train == 0.0 {
        None
    } else {
        Some((dot / (norm_val * norm_train)).clamp(-1.0, 1.0))
    }
}

/// Cosine similarity of the two gradients; 0 when either has zero norm.
pub fn cosine(g_val: &[f32], g_train: &[f32]) -> Result<f64> {
    same_len(g_val, g_train)?;
    Ok(cosine_from_parts(dot(g_val, g_train), norm(g_val), norm(g_train)).unwrap_or(0.0))
}

/// Damping and structural switches for the second-order estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataInfConfig {
    pub lambda: f64,
    /// Weight on the `|X|^-1 Σ_z (g'·g_z)(g_z·g)` correction; 1 in normal use.
    pub correction: f64,
    /// Replaces the pooled denominator when set; `None` in normal use.
    pub denominator_override: Option<f64>,
}

impl DataInfConfig {
    pub const DEFAULT_LAMBDA: f64 = 0.1;

    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        Ok(DataInfConfig {
            lambda,
            correction: 1.0,
            denominator_override: None,
        })
    }

    /// Correction weight 0 and denominator 1: reduces exactly to TracIn.
    pub fn degenerate() -> Self {
        DataInfConfig {
            lambda: Self::DEFAULT_LAMBDA,
            correction: 0.0,
            denominator_override: Some(1.0),
        }
    }

    /// `(|X| |l| λ)^-1 Σ_x ‖g_x‖²` over the full training block.
    pub(crate) fn denominator(&self, train: &GradientBlock) -> Result<f64> {
        if let Some(d) = self.denominator_override {
            return Ok(d);
        }
        let n = train.num_samples();
        if n == 0 {
            return Err(Error::Empty("DataInf training block".into()));
        }
        let sq: f64 = train.rows().map(|r| dot(r, r)).sum();
        let d = sq / (n as f64 * train.dim() as f64 * self.lambda);
        if d == 0.0 {
            return Err(Error::ZeroDenominator(format!(
                "all training gradients in {} are zero",
                train.group()
            )));
        }
        Ok(d)
    }
}

impl Default for DataInfConfig {
    fn default() -> Self {
        DataInfConfig {
            lambda: Self::DEFAULT_LAMBDA,
            correction: 1.0,
            denominator_override: None,
        }
    }
}

/// Second-order scores for every (train, validation) pair, `[train][val]`.
///
/// `train` must be the complete training set: both the correction term and
/// the denominator sum over it.
///
/// score = [g'ᵀg − |X|⁻¹ Σ_z (g'ᵀg_z)(g_zᵀg)] / [(|X| |l| λ)⁻¹ Σ_x ‖g_x‖²]
pub fn datainf_scores(train: &GradientBlock, val: &GradientBlock, cfg: &DataInfConfig) -> Result<Vec<Vec<f64>>> {
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: val.dim(),
        });
    }
    let denom = cfg.denominator(train)?;
    let n = train.num_samples();
    let train_rows: Vec<&[f32]> = train.rows().collect();
    // gram[z][x] = g_z·g_x, cross[j][z] = g'_j·g_z
    let gram: Vec<Vec<f64>> = train_rows
        .iter()
        .map(|z| train_rows.iter().map(|x| dot(z, x)).collect())
        .collect();
    let cross: Vec<Vec<f64>> = val
        .rows()
        .map(|v| train_rows.iter().map(|z| dot(v, z)).collect())
        .collect();
    let inv_n = 1.0 / n as f64;
    Ok((0..n)
        .map(|x| {
            cross
                .iter()
                .map(|vz| {
                    let correction: f64 = (0..n).map(|z| vz[z] * gram[z][x]).sum();
                    (vz[x] - cfg.correction * inv_n * correction) / denom
                })
                .collect()
        })
        .collect())
}

/// Token-keyed view of one sample's compressed embedding gradient.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingRows<'a> {
    tokens: &'a [u32],
    width: usize,
    data: &'a [f32],
}

impl<'a> EmbeddingRows<'a> {
    pub fn new(tokens: &'a [u32], width: usize, data: &'a [f32]) -> Result<Self> {
        if width == 0 || tokens.len() * width != data.len() {
            return Err(Error::DimensionMismatch {
                expected: tokens.len() * width,
                actual: data.len(),
            });
        }
        Ok(EmbeddingRows { tokens, width, data })
    }

    /// View of row `index` of a token-keyed block.
    pub fn of_block(block: &'a GradientBlock, index: usize) -> Result<Self> {
        let tokens = block
            .row_tokens()
            .ok_or_else(|| Error::Format(format!("group {} has no token row layout", block.group())))?;
        EmbeddingRows::new(tokens, block.dim() / tokens.len(), block.row(index))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, token: u32) -> Option<&'a [f32]> {
        self.tokens
            .binary_search(&token)
            .ok()
            .map(|i| &self.data[i * self.width..(i + 1) * self.width])
    }

    fn require(&self, token: u32) -> Result<&'a [f32]> {
        self.row(token)
            .ok_or_else(|| Error::invalid(format!("token {token} has no embedding row")))
    }

    /// Tokens whose row has any nonzero entry.
    pub fn active_tokens(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| self.data[i * self.width..(i + 1) * self.width].iter().any(|&v| v != 0.0))
            .map(|(_, &t)| t)
            .collect()
    }
}

fn sorted_unique(tokens: &[u32]) -> Vec<u32> {
    let mut t = tokens.to_vec();
    t.sort_unstable();
    t.dedup();
    t
}

/// Ascending tokens present in both sequences.
pub fn shared_tokens(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (a, b) = (sorted_unique(a), sorted_unique(b));
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn check_widths(a: &EmbeddingRows<'_>, b: &EmbeddingRows<'_>) -> Result<()> {
    if a.width != b.width {
        return Err(Error::DimensionMismatch {
            expected: a.width,
            actual: b.width,
        });
    }
    Ok(())
}

pub(crate) fn tracin_we_over(
    shared: &[u32],
    train_rows: &EmbeddingRows<'_>,
    val_rows: &EmbeddingRows<'_>,
) -> Result<f64> {
    let mut total = 0.0;
    for &t in shared {
        total += dot(val_rows.require(t)?, train_rows.require(t)?);
    }
    Ok(total)
}

/// Sum over shared tokens of the inner product of their embedding-row gradients.
pub fn tracin_we(
    train_tokens: &[u32],
    val_tokens: &[u32],
    train_rows: &EmbeddingRows<'_>,
    val_rows: &EmbeddingRows<'_>,
) -> Result<f64> {
    check_widths(train_rows, val_rows)?;
    tracin_we_over(&shared_tokens(train_tokens, val_tokens), train_rows, val_rows)
}

/// The `k` shared tokens with the largest training-row norms, ascending by
/// token id. Norm ties go to the smaller token id.
pub(crate) fn top_k_shared(shared: &[u32], train_rows: &EmbeddingRows<'_>, k: usize) -> Result<Vec<u32>> {
    if shared.len() <= k {
        return Ok(shared.to_vec());
    }
    let mut ranked = shared
        .iter()
        .map(|&t| Ok((norm(train_rows.require(t)?), t)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<u32> = ranked.into_iter().take(k).map(|(_, t)| t).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// [`tracin_we`] restricted to the `k` shared tokens whose training-sample
/// rows have the largest Euclidean norm.
pub fn tracin_we_topk(
    train_tokens: &[u32],
    val_tokens: &[u32],
    train_rows: &EmbeddingRows<'_>,
    val_rows: &EmbeddingRows<'_>,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("top-k needs k >= 1"));
    }
    check_widths(train_rows, val_rows)?;
    let shared = shared_tokens(train_tokens, val_tokens);
    let picked = top_k_shared(&shared, train_rows, k)?;
    tracin_we_over(&picked, train_rows, val_rows)
}
