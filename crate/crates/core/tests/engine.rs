mod common;

use common::{datainf_direct, naive_influence, random_stores};
use layerscope::influence::{compute_influence, datainf_scores, DataInfConfig, InfluenceOptions, Method, TilingPlan, TokenIndex};
use layerscope::{GradientBlock, GroupId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tiled_matches_naive_for_every_method() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let dense = [(GroupId::hidden(1), 17), (GroupId::cl(), 5)];
    let s = random_stores(&mut rng, 20, 10, &dense, 12, 3);
    let index = TokenIndex::new(s.tokens.iter().map(|(&id, t)| (id, t.as_slice())));
    let opts = InfluenceOptions {
        datainf: DataInfConfig::new(0.1).unwrap(),
        top_k: 4,
        tokens: Some(&index),
    };
    for method in Method::ALL {
        let (groups, want) = naive_influence(&s.train, &s.val, method, 0.1, 4, &s.tokens);
        let full = compute_influence(&s.train, &s.val, method, TilingPlan::new(20, 10).unwrap(), &opts).unwrap();
        assert_eq!(full.groups, groups);
        for plan in [TilingPlan::new(1, 1).unwrap(), TilingPlan::new(7, 3).unwrap(), TilingPlan::new(64, 64).unwrap()] {
            let t = compute_influence(&s.train, &s.val, method, plan, &opts).unwrap();
            assert_eq!(t.entries, full.entries, "{method} differs between plans");
        }
        for (a, b) in full.entries.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "{method}: {a} vs {b}");
        }
    }
}

#[test]
fn embedding_tokens_default_to_nonzero_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = random_stores(&mut rng, 6, 4, &[], 8, 2);
    let index = TokenIndex::new(s.tokens.iter().map(|(&id, t)| (id, t.as_slice())));
    let with = InfluenceOptions {
        tokens: Some(&index),
        ..InfluenceOptions::default()
    };
    let a = compute_influence(&s.train, &s.val, Method::TracInWE, TilingPlan::default(), &with).unwrap();
    let b = compute_influence(&s.train, &s.val, Method::TracInWE, TilingPlan::default(), &InfluenceOptions::default()).unwrap();
    assert_eq!(a.entries, b.entries);
}

#[test]
fn datainf_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=4);
        let dim = rng.random_range(1..=6);
        let lambda = rng.random_range(0.01..2.0);
        let mk = |rows: usize, rng: &mut ChaCha8Rng| {
            let v = (0..rows * dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            GradientBlock::new(GroupId::cl(), dim, (0..rows as u64).collect(), v).unwrap()
        };
        let (train, val) = (mk(n, &mut rng), mk(k, &mut rng));
        let got = datainf_scores(&train, &val, &DataInfConfig::new(lambda).unwrap()).unwrap();
        let rows: Vec<&[f32]> = train.rows().collect();
        for x in 0..n {
            for j in 0..k {
                let want = datainf_direct(&rows, val.row(j), x, lambda);
                let err = (got[x][j] - want).abs() / want.abs().max(f64::MIN_POSITIVE);
                assert!(err < 1e-10 || (got[x][j] - want).abs() < 1e-300, "{} vs {want}", got[x][j]);
            }
        }
    }
}
