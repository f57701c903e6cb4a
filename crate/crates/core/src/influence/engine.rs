//! Tiled evaluation of an influence method over a pair of gradient stores.
//!
//! Training rows are cut into tiles of `train_tile` samples and validation
//! rows into tiles of `validation_tile`; tiles are visited train-major. Each
//! cell is computed by one worker with a fixed reduction order, so the tensor
//! does not depend on the plan or the number of threads.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{cosine_from_parts, dot, norm, shared_tokens, top_k_shared, tracin_we_over, DataInfConfig, EmbeddingRows};
use super::tensor::{InfluenceTensor, Method};
use crate::error::{Error, Result};
use crate::gradstore::{GradientBlock, GradientStore, GroupId, SampleId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingPlan {
    pub train_tile: usize,
    pub validation_tile: usize,
}

impl TilingPlan {
    pub fn new(train_tile: usize, validation_tile: usize) -> Result<Self> {
        let plan = TilingPlan {
            train_tile,
            validation_tile,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_tile == 0 || self.validation_tile == 0 {
            return Err(Error::invalid("tile sizes must be at least 1"));
        }
        Ok(())
    }
}

impl Default for TilingPlan {
    fn default() -> Self {
        TilingPlan {
            train_tile: 128,
            validation_tile: 64,
        }
    }
}

/// Token set of every sample, for the embedding-row methods.
#[derive(Clone, Debug, Default)]
pub struct TokenIndex {
    tokens: HashMap<SampleId, Vec<u32>>,
}

impl TokenIndex {
    pub fn new<'a>(samples: impl IntoIterator<Item = (SampleId, &'a [u32])>) -> Self {
        let tokens = samples
            .into_iter()
            .map(|(id, t)| {
                let mut t = t.to_vec();
                t.sort_unstable();
                t.dedup();
                (id, t)
            })
            .collect();
        TokenIndex { tokens }
    }

    pub fn get(&self, id: SampleId) -> Option<&[u32]> {
        self.tokens.get(&id).map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InfluenceOptions<'a> {
    pub datainf: DataInfConfig,
    /// Shared tokens kept by `TracInWE10`.
    pub top_k: usize,
    /// Sample tokens for `TracInWE*`. Without it, a sample's tokens are the
    /// rows of its gradient that are not identically zero.
    pub tokens: Option<&'a TokenIndex>,
}

impl Default for InfluenceOptions<'_> {
    fn default() -> Self {
        InfluenceOptions {
            datainf: DataInfConfig::default(),
            top_k: 10,
            tokens: None,
        }
    }
}

enum Kernel {
    Dot,
    Cosine {
        train_norms: Vec<f64>,
        val_norms: Vec<f64>,
    },
    DataInf {
        /// `Σ_z (g'_j·g_z) g_z` for every validation sample `j`.
        projections: Vec<Vec<f64>>,
        weight: f64,
        denominator: f64,
    },
    Embedding {
        train_tokens: Vec<Vec<u32>>,
        val_tokens: Vec<Vec<u32>>,
        top_k: Option<usize>,
    },
}

struct GroupPlan<'a> {
    train: &'a GradientBlock,
    val: &'a GradientBlock,
    kernel: Kernel,
}

fn sample_tokens(block: &GradientBlock, index: Option<&TokenIndex>) -> Result<Vec<Vec<u32>>> {
    (0..block.num_samples())
        .map(|i| match index {
            Some(ix) => {
                let id = block.samples()[i];
                ix.get(id).map(<[u32]>::to_vec).ok_or(Error::UnknownSample(id))
            }
            None => Ok(EmbeddingRows::of_block(block, i)?.active_tokens()),
        })
        .collect()
}

fn datainf_projections(train: &GradientBlock, val: &GradientBlock) -> Vec<Vec<f64>> {
    val.rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|v| {
            let mut acc = vec![0.0f64; train.dim()];
            for z in train.rows() {
                let a = dot(v, z);
                if a != 0.0 {
                    for (u, &g) in acc.iter_mut().zip(z) {
                        *u += a * f64::from(g);
                    }
                }
            }
            acc
        })
        .collect()
}

impl<'a> GroupPlan<'a> {
    fn prepare(train: &'a GradientBlock, val: &'a GradientBlock, method: Method, opts: &InfluenceOptions<'_>) -> Result<Self> {
        if train.dim() != val.dim() {
            return Err(Error::invalid(format!(
                "group {} has dim {} for train but {} for validation",
                train.group(),
                train.dim(),
                val.dim()
            )));
        }
        let kernel = match method {
            Method::TracIn => Kernel::Dot,
            Method::Cosine => Kernel::Cosine {
                train_norms: train.rows().map(norm).collect(),
                val_norms: val.rows().map(norm).collect(),
            },
            Method::DataInf => Kernel::DataInf {
                denominator: opts.datainf.denominator(train)?,
                weight: opts.datainf.correction / train.num_samples() as f64,
                projections: datainf_projections(train, val),
            },
            Method::TracInWE | Method::TracInWE10 => {
                if train.row_tokens() != val.row_tokens() || train.row_tokens().is_none() {
                    return Err(Error::Format(
                        "WE blocks need identical token row layouts in both stores".into(),
                    ));
                }
                if method == Method::TracInWE10 && opts.top_k == 0 {
                    return Err(Error::invalid("top_k must be at least 1"));
                }
                Kernel::Embedding {
                    train_tokens: sample_tokens(train, opts.tokens)?,
                    val_tokens: sample_tokens(val, opts.tokens)?,
                    top_k: (method == Method::TracInWE10).then_some(opts.top_k),
                }
            }
        };
        Ok(GroupPlan { train, val, kernel })
    }

    fn cell(&self, i: usize, j: usize, zero_norms: &AtomicU64) -> Result<f64> {
        let (g, v) = (self.train.row(i), self.val.row(j));
        Ok(match &self.kernel {
            Kernel::Dot => dot(v, g),
            Kernel::Cosine { train_norms, val_norms } => {
                cosine_from_parts(dot(v, g), val_norms[j], train_norms[i]).unwrap_or_else(|| {
                    zero_norms.fetch_add(1, Ordering::Relaxed);
                    0.0
                })
            }
            Kernel::DataInf {
                projections,
                weight,
                denominator,
            } => {
                let correction = projections[j]
                    .iter()
                    .zip(g)
                    .fold(0.0, |acc, (&u, &x)| acc + u * f64::from(x));
                (dot(v, g) - weight * correction) / denominator
            }
            Kernel::Embedding {
                train_tokens,
                val_tokens,
                top_k,
            } => {
                let train_rows = EmbeddingRows::of_block(self.train, i)?;
                let val_rows = EmbeddingRows::of_block(self.val, j)?;
                let mut shared = shared_tokens(&train_tokens[i], &val_tokens[j]);
                if let Some(k) = top_k {
                    shared = top_k_shared(&shared, &train_rows, *k)?;
                }
                tracin_we_over(&shared, &train_rows, &val_rows)?
            }
        })
    }
}

fn resolve_groups(train: &GradientStore, val: &GradientStore, method: Method) -> Result<Vec<GroupId>> {
    if method.embedding_only() {
        let we = GroupId::we();
        train.block(&we)?;
        val.block(&we)?;
        return Ok(vec![we]);
    }
    let tg: Vec<GroupId> = train.groups().cloned().collect();
    let vg: Vec<GroupId> = val.groups().cloned().collect();
    if tg != vg {
        return Err(Error::invalid(format!("group mismatch: train {tg:?} vs validation {vg:?}")));
    }
    if tg.is_empty() {
        return Err(Error::Empty("gradient stores have no groups".into()));
    }
    Ok(tg)
}

/// Evaluates `method` for every (train, validation, group) cell.
pub fn compute_influence(
    train: &GradientStore,
    val: &GradientStore,
    method: Method,
    plan: TilingPlan,
    opts: &InfluenceOptions<'_>,
) -> Result<InfluenceTensor> {
    plan.validate()?;
    let groups = resolve_groups(train, val, method)?;
    let plans = groups
        .iter()
        .map(|g| GroupPlan::prepare(train.block(g)?, val.block(g)?, method, opts))
        .collect::<Result<Vec<_>>>()?;

    let (n, k, ng) = (train.samples().len(), val.samples().len(), groups.len());
    let mut entries = vec![0.0f64; n * k * ng];
    let zero_norms = AtomicU64::new(0);
    if !entries.is_empty() {
        entries
            .par_chunks_mut(plan.train_tile * k * ng)
            .enumerate()
            .try_for_each(|(tile, chunk)| -> Result<()> {
                let i0 = tile * plan.train_tile;
                let rows = chunk.len() / (k * ng);
                for j0 in (0..k).step_by(plan.validation_tile) {
                    let j1 = (j0 + plan.validation_tile).min(k);
                    for di in 0..rows {
                        for j in j0..j1 {
                            for (gi, gp) in plans.iter().enumerate() {
                                chunk[(di * k + j) * ng + gi] = gp.cell(i0 + di, j, &zero_norms)?;
                            }
                        }
                    }
                }
                Ok(())
            })?;
    }
    let mut tensor = InfluenceTensor::new(
        method,
        train.samples().to_vec(),
        val.samples().to_vec(),
        groups,
        entries,
    )?;
    tensor.zero_norm_pairs = zero_norms.into_inner();
    Ok(tensor)
}
