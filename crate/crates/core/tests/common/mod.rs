//! Random gradient stores and brute-force influence oracles shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use layerscope::influence::Method;
use layerscope::toytask::{ModelConfig, ToyModel};
use layerscope::{GradientBlock, GradientStore, GroupId, SampleId, Split};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomStores {
    pub train: GradientStore,
    pub val: GradientStore,
    pub tokens: BTreeMap<SampleId, Vec<u32>>,
}

/// Each sample holds a random token subset of `vocab`; `WE` rows of tokens
/// outside it are zero, as a real embedding gradient would be.
pub fn random_stores(
    rng: &mut impl Rng,
    n_train: usize,
    n_val: usize,
    dense: &[(GroupId, usize)],
    vocab: u32,
    width: usize,
) -> RandomStores {
    let mut tokens = BTreeMap::new();
    let train = make_store(rng, Split::Train, (0..n_train as u64).collect(), dense, vocab, width, &mut tokens);
    let val = make_store(rng, Split::Validation, (1000..1000 + n_val as u64).collect(), dense, vocab, width, &mut tokens);
    RandomStores { train, val, tokens }
}

fn make_store(
    rng: &mut impl Rng,
    split: Split,
    ids: Vec<SampleId>,
    dense: &[(GroupId, usize)],
    vocab: u32,
    width: usize,
    tokens: &mut BTreeMap<SampleId, Vec<u32>>,
) -> GradientStore {
    let mut store = GradientStore::new(split, "random");
    for (g, dim) in dense {
        let values = (0..ids.len() * dim).map(|_| gaussianish(rng)).collect();
        store.insert(GradientBlock::new(g.clone(), *dim, ids.clone(), values).unwrap()).unwrap();
    }
    let mut we = Vec::with_capacity(ids.len() * vocab as usize * width);
    for &id in &ids {
        let len = rng.random_range(1..=vocab as usize);
        let mut own: Vec<u32> = index::sample(rng, vocab as usize, len).into_iter().map(|t| t as u32).collect();
        own.sort_unstable();
        for t in 0..vocab {
            let present = own.binary_search(&t).is_ok();
            for _ in 0..width {
                we.push(if present { gaussianish(rng) } else { 0.0 });
            }
        }
        tokens.insert(id, own);
    }
    let block = GradientBlock::new(GroupId::we(), vocab as usize * width, ids, we)
        .unwrap()
        .with_row_tokens((0..vocab).collect())
        .unwrap();
    store.insert(block).unwrap();
    store
}

fn gaussianish(rng: &mut impl Rng) -> f32 {
    (0..4).map(|_| rng.random_range(-1.0f32..1.0)).sum::<f32>() / 2.0
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Direct term-by-term DataInf: numerator and denominator written out as sums.
pub fn datainf_direct(train: &[&[f32]], g_val: &[f32], x: usize, lambda: f64) -> f64 {
    let n = train.len() as f64;
    let dim = g_val.len() as f64;
    let mut correction = 0.0;
    for z in train {
        correction += dot(g_val, z) * dot(z, train[x]);
    }
    let numerator = dot(g_val, train[x]) - correction / n;
    let mut sq = 0.0;
    for g in train {
        sq += dot(g, g);
    }
    let denominator = sq / (n * dim * lambda);
    numerator / denominator
}

fn we_rows(block: &GradientBlock, i: usize) -> BTreeMap<u32, &[f32]> {
    let tokens = block.row_tokens().unwrap();
    let w = block.dim() / tokens.len();
    tokens.iter().enumerate().map(|(k, &t)| (t, &block.row(i)[k * w..(k + 1) * w])).collect()
}

fn we_pair(train: &GradientBlock, val: &GradientBlock, i: usize, j: usize, tt: &[u32], vt: &[u32], top_k: Option<usize>) -> f64 {
    let (tr, vr) = (we_rows(train, i), we_rows(val, j));
    let mut shared: Vec<u32> = tt.iter().copied().filter(|t| vt.contains(t)).collect();
    shared.sort_unstable();
    shared.dedup();
    if let Some(k) = top_k {
        let mut by_norm: Vec<(f64, u32)> = shared.iter().map(|&t| (dot(tr[&t], tr[&t]).sqrt(), t)).collect();
        by_norm.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        shared = by_norm.into_iter().take(k).map(|(_, t)| t).collect();
        shared.sort_unstable();
    }
    shared.iter().map(|t| dot(vr[t], tr[t])).sum()
}

/// Plain double loop over all (train, validation) pairs, `[train][val][group]`.
pub fn naive_influence(
    train: &GradientStore,
    val: &GradientStore,
    method: Method,
    lambda: f64,
    top_k: usize,
    tokens: &BTreeMap<SampleId, Vec<u32>>,
) -> (Vec<GroupId>, Vec<f64>) {
    let groups: Vec<GroupId> = if method.embedding_only() {
        vec![GroupId::we()]
    } else {
        train.groups().cloned().collect()
    };
    let (n, k) = (train.samples().len(), val.samples().len());
    let mut out = vec![0.0; n * k * groups.len()];
    for i in 0..n {
        for j in 0..k {
            for (gi, g) in groups.iter().enumerate() {
                let tb = train.block(g).unwrap();
                let vb = val.block(g).unwrap();
                let (gt, gv) = (tb.row(i), vb.row(j));
                let v = match method {
                    Method::TracIn => dot(gv, gt),
                    Method::Cosine => {
                        let (a, b) = (dot(gv, gv).sqrt(), dot(gt, gt).sqrt());
                        if a == 0.0 || b == 0.0 {
                            0.0
                        } else {
                            dot(gv, gt) / (a * b)
                        }
                    }
                    Method::DataInf => {
                        let rows: Vec<&[f32]> = tb.rows().collect();
                        datainf_direct(&rows, gv, i, lambda)
                    }
                    Method::TracInWE | Method::TracInWE10 => {
                        let tt = &tokens[&train.samples()[i]];
                        let vt = &tokens[&val.samples()[j]];
                        let kk = (method == Method::TracInWE10).then_some(top_k);
                        we_pair(tb, vb, i, j, tt, vt, kk)
                    }
                };
                out[(i * k + j) * groups.len() + gi] = v;
            }
        }
    }
    (groups, out)
}

/// Worst relative error between analytic and central-difference gradients,
/// per (trial, group), over `trials` random model configurations.
pub fn finite_difference_errors(seed: u64, trials: u64, step: f64) -> Vec<(u64, GroupId, f64)> {
    let rel_err = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for trial in 0..trials {
        let cfg = ModelConfig {
            d_emb: rng.random_range(1..5),
            d_hidden: rng.random_range(1..5),
            stages_per_group: rng.random_range(1..3),
            embedding_init: 1.0,
        };
        let vocab = rng.random_range(3..9);
        let classes = rng.random_range(2..4);
        let model = ToyModel::init(vocab, classes, &cfg, trial).unwrap();
        let len = rng.random_range(1..6);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
        let label = rng.random_range(0..classes);
        let (_, grad) = model.sample_gradient(&tokens, label).unwrap();
        for g in model.group_names() {
            let analytic: Vec<f64> = grad.group_slices(&g).unwrap().concat();
            let sizes: Vec<usize> = model.params.group_slices(&g).unwrap().iter().map(|s| s.len()).collect();
            let mut worst = 0.0f64;
            let mut p = 0;
            for (slice, &size) in sizes.iter().enumerate() {
                for k in 0..size {
                    let bump = |delta: f64| {
                        let mut m = model.clone();
                        m.params.group_slices_mut(&g).unwrap()[slice][k] += delta;
                        m.loss(&tokens, label).unwrap()
                    };
                    let fd = (bump(step) - bump(-step)) / (2.0 * step);
                    worst = worst.max(rel_err(analytic[p], fd));
                    p += 1;
                }
            }
            out.push((trial, g, worst));
        }
    }
    out
}
