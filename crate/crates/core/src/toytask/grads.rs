use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradstore::{GradientBlock, GradientStore, GroupId, Split};

use super::dataset::Sample;
use super::model::{Parameters, ToyModel};

pub struct GradientRequest<'a> {
    pub split: Split,
    pub checkpoint_id: &'a str,
    pub groups: &'a [GroupId],
    /// Embedding rows kept for `WE` (compression); ascending and unique.
    pub we_tokens: &'a [u32],
}

/// Flattens one group of a gradient; `WE` keeps only `we_tokens` rows.
pub fn flatten_group(grad: &Parameters, group: &GroupId, d_emb: usize, we_tokens: &[u32]) -> Result<Vec<f32>> {
    if group.as_str() == GroupId::WE {
        let mut out = Vec::with_capacity(we_tokens.len() * d_emb);
        for &t in we_tokens {
            let start = t as usize * d_emb;
            let row = grad
                .embedding
                .get(start..start + d_emb)
                .ok_or_else(|| Error::invalid(format!("embedding row {t} out of range")))?;
            out.extend(row.iter().map(|&v| v as f32));
        }
        return Ok(out);
    }
    Ok(grad
        .group_slices(group)?
        .into_iter()
        .flatten()
        .map(|&v| v as f32)
        .collect())
}

/// Cross-entropy gradient of every sample on its own, one block per group.
///
/// Rows follow the order of `samples`; work is spread over the rayon pool.
pub fn per_sample_gradients(model: &ToyModel, samples: &[Sample], req: &GradientRequest<'_>) -> Result<GradientStore> {
    if req.we_tokens.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("we_tokens must be strictly ascending"));
    }
    for g in req.groups {
        model.params.group_slices(g)?;
    }
    let rows: Vec<Vec<Vec<f32>>> = samples
        .par_iter()
        .map(|s| {
            let (_, grad) = model.sample_gradient(&s.tokens, s.label)?;
            req.groups
                .iter()
                .map(|g| {
                    let row = flatten_group(&grad, g, model.d_emb, req.we_tokens)?;
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of sample {} in {g}", s.id)));
                    }
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let ids: Vec<_> = samples.iter().map(|s| s.id).collect();
    let mut store = GradientStore::new(req.split, req.checkpoint_id);
    store.note = Some(format!(
        "toy model; WE = embedding rows of row_tokens (row-major, width {}); G*/CL = per stage weight (inputs x outputs, row-major) then bias",
        model.d_emb
    ));
    for (gi, g) in req.groups.iter().enumerate() {
        let dim = match g.as_str() {
            GroupId::WE => req.we_tokens.len() * model.d_emb,
            _ => model.params.group_slices(g)?.iter().map(|s| s.len()).sum(),
        };
        let values: Vec<f32> = rows.iter().flat_map(|r| r[gi].iter().copied()).collect();
        let mut block = GradientBlock::new(g.clone(), dim, ids.clone(), values)?;
        if g.as_str() == GroupId::WE {
            block = block.with_row_tokens(req.we_tokens.to_vec())?;
        }
        store.insert(block)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytask::model::ModelConfig;

    fn model() -> ToyModel {
        let cfg = ModelConfig {
            d_emb: 3,
            d_hidden: 4,
            stages_per_group: 2,
            embedding_init: 1.0,
        };
        ToyModel::init(8, 2, &cfg, 9).unwrap()
    }

    fn request<'a>(groups: &'a [GroupId], tokens: &'a [u32]) -> GradientRequest<'a> {
        GradientRequest {
            split: Split::Train,
            checkpoint_id: "epoch-0",
            groups,
            we_tokens: tokens,
        }
    }

    #[test]
    fn duplicate_samples_give_identical_rows() {
        let m = model();
        let s = Sample {
            id: 1,
            tokens: vec![0, 3, 4],
            label: 1,
        };
        let samples = vec![s.clone(), Sample { id: 2, ..s }];
        let groups = m.group_names();
        let tokens: Vec<u32> = (0..8).collect();
        let store = per_sample_gradients(&m, &samples, &request(&groups, &tokens)).unwrap();
        for block in store.blocks() {
            assert_eq!(block.row(0), block.row(1));
        }
    }

    #[test]
    fn absent_token_rows_are_zero() {
        let m = model();
        let samples = vec![Sample {
            id: 0,
            tokens: vec![0, 2],
            label: 0,
        }];
        let groups = [GroupId::we()];
        let tokens = [0, 2, 5];
        let store = per_sample_gradients(&m, &samples, &request(&groups, &tokens)).unwrap();
        let we = store.block(&GroupId::we()).unwrap();
        assert_eq!(we.dim(), 9);
        assert_eq!(we.token_row_width(), Some(3));
        assert!(we.row(0)[6..9].iter().all(|&v| v == 0.0));
        assert!(we.row(0)[0..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn per_sample_sum_equals_batch_gradient() {
        let m = model();
        let samples: Vec<Sample> = (0..6)
            .map(|i| Sample {
                id: i,
                tokens: vec![0, (i % 7 + 1) as u32, ((i * 3) % 7 + 1) as u32],
                label: (i % 2) as usize,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, batch) = m.batch_gradient(&refs).unwrap();
        let mut summed = m.params.zeros_like();
        for s in &samples {
            let (_, g) = m.sample_gradient(&s.tokens, s.label).unwrap();
            summed.axpy(1.0 / samples.len() as f64, &g);
        }
        for g in m.group_names() {
            let a: Vec<f64> = summed.group_slices(&g).unwrap().concat();
            let b: Vec<f64> = batch.group_slices(&g).unwrap().concat();
            for (x, y) in a.iter().zip(&b) {
                let scale = x.abs().max(y.abs()).max(1e-12);
                assert!((x - y).abs() / scale < 1e-5 || (x - y).abs() < 1e-15, "{g}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn unknown_group_is_rejected() {
        let m = model();
        let groups = [GroupId::new("G9").unwrap()];
        assert!(per_sample_gradients(&m, &[], &request(&groups, &[])).is_err());
    }
}
