use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use layerscope::influence::{compute_influence, InfluenceOptions, Method, TilingPlan};
use layerscope::{GradientBlock, GradientStore, GroupId, Split};

fn store(split: Split, n: usize, dim: usize, offset: u64, rng: &mut ChaCha8Rng) -> GradientStore {
    let mut s = GradientStore::new(split, "bench");
    for g in [GroupId::hidden(1), GroupId::cl()] {
        let values = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        s.insert(GradientBlock::new(g, dim, (offset..offset + n as u64).collect(), values).unwrap())
            .unwrap();
    }
    s
}

fn engine(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = store(Split::Train, 500, 256, 0, &mut rng);
    let val = store(Split::Validation, 100, 256, 10_000, &mut rng);
    let opts = InfluenceOptions::default();
    let mut group = c.benchmark_group("compute_influence");
    group.sample_size(10);
    for method in [Method::TracIn, Method::Cosine, Method::DataInf] {
        for plan in [TilingPlan::new(1, 1).unwrap(), TilingPlan::default()] {
            let label = format!("{method}/{}x{}", plan.train_tile, plan.validation_tile);
            group.bench_with_input(BenchmarkId::from_parameter(label), &plan, |b, &plan| {
                b.iter(|| compute_influence(black_box(&train), black_box(&val), method, plan, &opts).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, engine);
criterion_main!(benches);
