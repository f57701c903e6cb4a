//! The toy classifier: mean-pooled token embeddings, four groups of
//! affine+tanh stages and an affine softmax head.
//!
//! Two independent backward passes exist. `sample_gradient` runs
//! vector backprop for a single sample (used for attribution) and
//! `batch_gradient` runs matrix backprop over a minibatch (used by the
//! trainer). Their agreement is tested.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstore::GroupId;
use crate::seed;

use super::dataset::Sample;

pub const HIDDEN_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hidden: usize,
    /// Affine+tanh stages in each of the four hidden groups.
    pub stages_per_group: usize,
    /// Embedding entries start uniform in `[-embedding_init, embedding_init]`.
    pub embedding_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 16,
            d_hidden: 16,
            stages_per_group: 1,
            embedding_init: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_hidden == 0 || self.stages_per_group == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(self.embedding_init.is_finite() && self.embedding_init >= 0.0) {
            return Err(Error::invalid("embedding_init must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `y = x W + b` with `W` stored `inputs x outputs` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut d = Dense::zeros(inputs, outputs);
        for w in &mut d.weight {
            *w = rng.random_range(-limit..=limit);
        }
        d
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (yj, &w) in y.iter_mut().zip(row) {
                *yj += xi * w;
            }
        }
        y
    }

    /// `W dy`, the gradient flowing back to the input.
    fn back(&self, dy: &[f64]) -> Vec<f64> {
        (0..self.inputs)
            .map(|i| {
                let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
                row.iter().zip(dy).map(|(w, d)| w * d).sum()
            })
            .collect()
    }

    fn slices(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// `vocab_size x d_emb`, row-major.
    pub embedding: Vec<f64>,
    /// `stages[g]` holds the stages of hidden group `G{g+1}`.
    pub stages: Vec<Vec<Dense>>,
    pub head: Dense,
}

impl Parameters {
    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            embedding: vec![0.0; self.embedding.len()],
            stages: self
                .stages
                .iter()
                .map(|g| g.iter().map(|d| Dense::zeros(d.inputs, d.outputs)).collect())
                .collect(),
            head: Dense::zeros(self.head.inputs, self.head.outputs),
        }
    }

    fn all_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embedding];
        for d in self.stages.iter_mut().flatten() {
            out.extend(d.slices_mut());
        }
        out.extend(self.head.slices_mut());
        out
    }

    fn all_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embedding];
        for d in self.stages.iter().flatten() {
            out.extend(d.slices());
        }
        out.extend(self.head.slices());
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Parameters) {
        for (dst, src) in self.all_slices_mut().into_iter().zip(other.all_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Parameter slices of one group in flattening order: weight then bias
    /// per stage; the full embedding table for `WE`.
    pub fn group_slices(&self, group: &GroupId) -> Result<Vec<&[f64]>> {
        match group.as_str() {
            GroupId::WE => Ok(vec![&self.embedding]),
            GroupId::CL => Ok(self.head.slices().to_vec()),
            _ => {
                let g = hidden_index(group, self.stages.len())?;
                Ok(self.stages[g].iter().flat_map(|d| d.slices()).collect())
            }
        }
    }

    pub fn group_slices_mut(&mut self, group: &GroupId) -> Result<Vec<&mut [f64]>> {
        match group.as_str() {
            GroupId::WE => Ok(vec![&mut self.embedding]),
            GroupId::CL => Ok(self.head.slices_mut().into_iter().collect()),
            _ => {
                let g = hidden_index(group, self.stages.len())?;
                Ok(self.stages[g].iter_mut().flat_map(|d| d.slices_mut()).collect())
            }
        }
    }
}

fn hidden_index(group: &GroupId, groups: usize) -> Result<usize> {
    group
        .as_str()
        .strip_prefix('G')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&n| (1..=groups).contains(&n))
        .map(|n| n - 1)
        .ok_or_else(|| Error::UnknownGroup(group.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub d_emb: usize,
    pub params: Parameters,
}

struct Activations {
    pooled: Vec<f64>,
    /// Output of every stage, in forward order.
    hidden: Vec<Vec<f64>>,
    probs: Vec<f64>,
    loss_terms: (f64, f64),
}

fn softmax_stats(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (exps.iter().map(|e| e / sum).collect(), max + sum.ln())
}

impl ToyModel {
    pub fn init(vocab_size: usize, num_classes: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 || num_classes < 2 {
            return Err(Error::invalid("need a vocabulary and at least two classes"));
        }
        let mut rng = seed::rng(seed, "init");
        let a = cfg.embedding_init;
        let embedding = (0..vocab_size * cfg.d_emb)
            .map(|_| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 })
            .collect();
        let mut inputs = cfg.d_emb;
        let mut stages = Vec::with_capacity(HIDDEN_GROUPS);
        for _ in 0..HIDDEN_GROUPS {
            let mut group = Vec::with_capacity(cfg.stages_per_group);
            for _ in 0..cfg.stages_per_group {
                group.push(Dense::xavier(inputs, cfg.d_hidden, &mut rng));
                inputs = cfg.d_hidden;
            }
            stages.push(group);
        }
        let head = Dense::xavier(cfg.d_hidden, num_classes, &mut rng);
        Ok(ToyModel {
            vocab_size,
            num_classes,
            d_emb: cfg.d_emb,
            params: Parameters {
                embedding,
                stages,
                head,
            },
        })
    }

    /// `WE`, `G1`..`G4`, `CL`.
    pub fn group_names(&self) -> Vec<GroupId> {
        let mut names = vec![GroupId::we()];
        names.extend((1..=self.params.stages.len()).map(GroupId::hidden));
        names.push(GroupId::cl());
        names
    }

    fn pool(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let d = self.d_emb;
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
            let row = &self.params.embedding[t as usize * d..(t as usize + 1) * d];
            for (p, &e) in pooled.iter_mut().zip(row) {
                *p += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(pooled)
    }

    fn forward(&self, tokens: &[u32], label: usize) -> Result<Activations> {
        let pooled = self.pool(tokens)?;
        let mut hidden = Vec::new();
        let mut x = pooled.clone();
        for stage in self.params.stages.iter().flatten() {
            x = stage.apply(&x).into_iter().map(f64::tanh).collect();
            hidden.push(x.clone());
        }
        let logits = self.params.head.apply(&x);
        let (probs, lse) = softmax_stats(&logits);
        let label_logit = logits.get(label).copied().unwrap_or(f64::NAN);
        Ok(Activations {
            pooled,
            hidden,
            probs,
            loss_terms: (lse, label_logit),
        })
    }

    pub fn probabilities(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens, 0)?.probs)
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, tokens: &[u32], label: usize) -> Result<f64> {
        self.check_label(label)?;
        let (lse, z) = self.forward(tokens, label)?.loss_terms;
        Ok(lse - z)
    }

    /// Argmax class; the lowest index wins ties.
    pub fn predict_one(&self, tokens: &[u32]) -> Result<usize> {
        let probs = self.probabilities(tokens)?;
        let mut best = 0;
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p > probs[best] {
                best = c;
            }
        }
        Ok(best)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        Ok(())
    }

    /// Loss and full parameter gradient of a single sample.
    pub fn sample_gradient(&self, tokens: &[u32], label: usize) -> Result<(f64, Parameters)> {
        self.check_label(label)?;
        let act = self.forward(tokens, label)?;
        let mut grad = self.params.zeros_like();

        let mut delta = act.probs.clone();
        delta[label] -= 1.0;

        let last = act.hidden.last().unwrap_or(&act.pooled);
        outer_into(&mut grad.head.weight, last, &delta);
        grad.head.bias.copy_from_slice(&delta);
        let mut upstream = self.params.head.back(&delta);

        let stages: Vec<&Dense> = self.params.stages.iter().flatten().collect();
        let mut grad_stages: Vec<&mut Dense> = grad.stages.iter_mut().flatten().collect();
        for s in (0..stages.len()).rev() {
            let out = &act.hidden[s];
            let input = if s == 0 { &act.pooled } else { &act.hidden[s - 1] };
            let dz: Vec<f64> = upstream.iter().zip(out).map(|(u, h)| u * (1.0 - h * h)).collect();
            outer_into(&mut grad_stages[s].weight, input, &dz);
            grad_stages[s].bias.copy_from_slice(&dz);
            upstream = stages[s].back(&dz);
        }

        let d = self.d_emb;
        let inv = 1.0 / tokens.len() as f64;
        for &t in tokens {
            let row = &mut grad.embedding[t as usize * d..(t as usize + 1) * d];
            for (g, u) in row.iter_mut().zip(&upstream) {
                *g += u * inv;
            }
        }
        let (lse, z) = act.loss_terms;
        Ok((lse - z, grad))
    }

    /// Mean loss and mean-loss gradient over a minibatch, via matrix backprop.
    pub fn batch_gradient(&self, batch: &[&Sample]) -> Result<(f64, Parameters)> {
        if batch.is_empty() {
            return Err(Error::Empty("minibatch".into()));
        }
        let b = batch.len();
        let inv_b = 1.0 / b as f64;
        let mut layers: Vec<Matrix> = Vec::new();
        let mut x = Matrix::zeros(b, self.d_emb);
        for (r, s) in batch.iter().enumerate() {
            self.check_label(s.label)?;
            x.row_mut(r).copy_from_slice(&self.pool(&s.tokens)?);
        }
        layers.push(x);
        for stage in self.params.stages.iter().flatten() {
            let mut z = layers.last().unwrap().matmul_dense(stage);
            z.data.iter_mut().for_each(|v| *v = v.tanh());
            layers.push(z);
        }
        let logits = layers.last().unwrap().matmul_dense(&self.params.head);

        let mut loss = 0.0;
        let mut delta = Matrix::zeros(b, self.num_classes);
        for (r, s) in batch.iter().enumerate() {
            let (probs, lse) = softmax_stats(logits.row(r));
            loss += lse - logits.row(r)[s.label];
            let drow = delta.row_mut(r);
            for (d, p) in drow.iter_mut().zip(&probs) {
                *d = p * inv_b;
            }
            drow[s.label] -= inv_b;
        }

        let mut grad = self.params.zeros_like();
        layers.last().unwrap().transpose_matmul_into(&delta, &mut grad.head.weight);
        delta.column_sums_into(&mut grad.head.bias);
        let mut upstream = delta.matmul_transposed(&self.params.head);

        let stages: Vec<&Dense> = self.params.stages.iter().flatten().collect();
        let mut grad_stages: Vec<&mut Dense> = grad.stages.iter_mut().flatten().collect();
        for s in (0..stages.len()).rev() {
            let out = &layers[s + 1];
            let mut dz = upstream;
            for (d, h) in dz.data.iter_mut().zip(&out.data) {
                *d *= 1.0 - h * h;
            }
            layers[s].transpose_matmul_into(&dz, &mut grad_stages[s].weight);
            dz.column_sums_into(&mut grad_stages[s].bias);
            upstream = dz.matmul_transposed(stages[s]);
        }

        let d = self.d_emb;
        for (r, s) in batch.iter().enumerate() {
            let inv = 1.0 / s.tokens.len() as f64;
            for &t in &s.tokens {
                let row = &mut grad.embedding[t as usize * d..(t as usize + 1) * d];
                for (g, u) in row.iter_mut().zip(upstream.row(r)) {
                    *g += u * inv;
                }
            }
        }
        Ok((loss * inv_b, grad))
    }
}

fn outer_into(dst: &mut [f64], left: &[f64], right: &[f64]) {
    for (i, &l) in left.iter().enumerate() {
        for (j, &r) in right.iter().enumerate() {
            dst[i * right.len() + j] = l * r;
        }
    }
}

/// Minimal row-major matrix for the batched backward pass.
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self W + b`.
    fn matmul_dense(&self, dense: &Dense) -> Matrix {
        let mut out = Matrix::zeros(self.rows, dense.outputs);
        for r in 0..self.rows {
            let x = self.row(r);
            let y = out.row_mut(r);
            y.copy_from_slice(&dense.bias);
            for k in 0..dense.inputs {
                let w = &dense.weight[k * dense.outputs..(k + 1) * dense.outputs];
                for (yj, wj) in y.iter_mut().zip(w) {
                    *yj += x[k] * wj;
                }
            }
        }
        out
    }

    /// `self Wᵀ`.
    fn matmul_transposed(&self, dense: &Dense) -> Matrix {
        let mut out = Matrix::zeros(self.rows, dense.inputs);
        for r in 0..self.rows {
            let d = self.row(r);
            let y = out.row_mut(r);
            for (k, yk) in y.iter_mut().enumerate() {
                let w = &dense.weight[k * dense.outputs..(k + 1) * dense.outputs];
                *yk = w.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// `dst = selfᵀ other`, shaped `self.cols x other.cols`.
    fn transpose_matmul_into(&self, other: &Matrix, dst: &mut [f64]) {
        dst.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                let out = &mut dst[i * other.cols..(i + 1) * other.cols];
                for (o, &bj) in out.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
    }

    fn column_sums_into(&self, dst: &mut [f64]) {
        dst.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.rows {
            for (d, v) in dst.iter_mut().zip(self.row(r)) {
                *d += v;
            }
        }
    }
}
