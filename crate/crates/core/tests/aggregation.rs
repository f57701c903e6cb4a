use layerscope::aggregate::{aggregate_mean, aggregate_rank, aggregate_vote, GroupSelection, ValidationMask};
use layerscope::{GroupId, InfluenceTensor, Method};
use proptest::prelude::*;

fn monotone(kind: u8, a: f64, b: f64) -> impl Fn(f64) -> f64 {
    move |x| match kind {
        0 => a * x + b,
        1 => x * x * x + b,
        _ => (x / 4.0).exp() * a,
    }
}

fn tensor_strategy() -> impl Strategy<Value = (InfluenceTensor, Vec<bool>)> {
    (2usize..12, 1usize..5, 1usize..3).prop_flat_map(|(n, k, g)| {
        (
            proptest::collection::vec(-64i32..64, n * k * g),
            proptest::collection::vec(any::<bool>(), k),
        )
            .prop_map(move |(v, mut mask)| {
                mask[0] = true;
                let t = InfluenceTensor::new(
                    Method::TracIn,
                    (0..n as u64).collect(),
                    (0..k as u64).collect(),
                    (1..=g).map(GroupId::hidden).collect(),
                    v.into_iter().map(|x| f64::from(x) / 8.0).collect(),
                )
                .unwrap();
                (t, mask)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rank_and_vote_ignore_monotone_slice_transforms(
        (t, mask) in tensor_strategy(),
        kinds in proptest::collection::vec((0u8..3, 0.5f64..4.0, -3.0f64..3.0), 16),
        k in 1usize..6,
    ) {
        let ng = t.num_groups();
        let u = t.map_slices(|j, g, x| {
            let (kind, a, b) = kinds[(j * ng + g) % kinds.len()];
            monotone(kind, a, b)(x)
        }).unwrap();
        let m = ValidationMask(mask);
        let sel = GroupSelection::All;
        prop_assert_eq!(aggregate_rank(&t, &sel, &m).unwrap(), aggregate_rank(&u, &sel, &m).unwrap());
        prop_assert_eq!(aggregate_vote(&t, &sel, &m, k).unwrap(), aggregate_vote(&u, &sel, &m, k).unwrap());
    }

    #[test]
    fn masked_scores_are_additive((t, mask) in tensor_strategy()) {
        // rank over the mask equals the sum of single-sample ranks
        let sel = GroupSelection::All;
        let full = aggregate_rank(&t, &sel, &ValidationMask(mask.clone())).unwrap();
        let mut sum = vec![0.0; t.num_train()];
        for (j, &on) in mask.iter().enumerate() {
            if on {
                let mut single = vec![false; mask.len()];
                single[j] = true;
                let part = aggregate_rank(&t, &sel, &ValidationMask(single)).unwrap();
                for (s, v) in sum.iter_mut().zip(part.scores.values()) {
                    *s += v;
                }
            }
        }
        prop_assert_eq!(full.scores.values().copied().collect::<Vec<_>>(), sum);
    }
}

#[test]
fn mean_is_not_transform_invariant() {
    let t = InfluenceTensor::new(Method::TracIn, vec![0, 1], vec![0, 1], vec![GroupId::cl()], vec![1.0, -3.0, 2.0, 0.0]).unwrap();
    let u = t.map_slices(|j, _, x| if j == 0 { x * 10.0 } else { x }).unwrap();
    let sel = GroupSelection::All;
    assert_ne!(aggregate_mean(&t, &sel).unwrap(), aggregate_mean(&u, &sel).unwrap());
}
