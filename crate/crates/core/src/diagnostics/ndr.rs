use serde::{Deserialize, Serialize};

use crate::aggregate::ScoreTable;
use crate::error::{Error, Result};
use crate::toytask::{removal_count, NoiseMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdrReport {
    pub fraction: f64,
    pub ndr: f64,
    /// NDR of the `r` lowest-scoring samples, for `r = 1..=N`.
    pub curve: Vec<f64>,
    pub auc: f64,
}

/// For every prefix of the ascending ranking, whether the sample is flipped.
fn flipped_in_order(scores: &ScoreTable, mask: &NoiseMask) -> Result<Vec<bool>> {
    if mask.is_empty() {
        return Err(Error::Undefined("noise detection rate with no flipped labels".into()));
    }
    if let Some(&id) = mask.flipped.iter().find(|id| !scores.scores.contains_key(id)) {
        return Err(Error::UnknownSample(id));
    }
    Ok(scores.ascending().into_iter().map(|id| mask.contains(id)).collect())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("NDR fraction {fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Share of the flipped samples found among the `floor(fraction * N)`
/// lowest-scoring ones (ties by ascending id).
pub fn ndr(scores: &ScoreTable, mask: &NoiseMask, fraction: f64) -> Result<f64> {
    check_fraction(fraction)?;
    let order = flipped_in_order(scores, mask)?;
    let count = removal_count(fraction, order.len());
    let found = order[..count].iter().filter(|&&f| f).count();
    Ok(found as f64 / mask.len() as f64)
}

pub fn ndr_curve_auc(scores: &ScoreTable, mask: &NoiseMask, fraction: f64) -> Result<NdrReport> {
    check_fraction(fraction)?;
    let order = flipped_in_order(scores, mask)?;
    let total = mask.len() as f64;
    let mut found = 0usize;
    let curve: Vec<f64> = order
        .iter()
        .map(|&f| {
            found += usize::from(f);
            found as f64 / total
        })
        .collect();
    let count = removal_count(fraction, order.len());
    let ndr = if count == 0 { 0.0 } else { curve[count - 1] };
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok(NdrReport {
        fraction,
        ndr,
        curve,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn mask(ids: &[u64]) -> NoiseMask {
        NoiseMask {
            flipped: ids.iter().copied().collect(),
            original_labels: ids.iter().map(|&i| (i, 0)).collect(),
        }
    }

    /// Sample `i` gets score `order[i]`.
    fn table(order: &[u64]) -> ScoreTable {
        ScoreTable::new("t", "Mean", "all", order.iter().enumerate().map(|(i, &s)| (i as u64, s as f64)).collect()).unwrap()
    }

    #[test]
    fn full_and_zero_capture() {
        let t = table(&(0..10).collect::<Vec<_>>());
        assert_eq!(ndr(&t, &mask(&[0, 2]), 0.3).unwrap(), 1.0);
        assert_eq!(ndr(&t, &mask(&[7, 9]), 0.3).unwrap(), 0.0);
        assert_eq!(ndr(&t, &mask(&[0, 9]), 0.3).unwrap(), 0.5);
    }

    #[test]
    fn ties_follow_sample_ids() {
        let t = ScoreTable::new("t", "Mean", "all", (0..10u64).map(|i| (i, 0.0)).collect()).unwrap();
        assert_eq!(ndr(&t, &mask(&[1, 2]), 0.3).unwrap(), 1.0);
        assert_eq!(ndr(&t, &mask(&[3]), 0.3).unwrap(), 0.0);
    }

    #[test]
    fn curve_shapes() {
        let t = table(&(0..10).collect::<Vec<_>>());
        let bottom = ndr_curve_auc(&t, &mask(&[0, 1]), 0.3).unwrap();
        assert_eq!(bottom.curve[1], 1.0);
        assert_eq!(bottom.curve[0], 0.5);
        assert!(bottom.auc > 0.5);
        let top = ndr_curve_auc(&t, &mask(&[8, 9]), 0.3).unwrap();
        assert!(top.curve[..8].iter().all(|&v| v == 0.0));
        assert_eq!(*top.curve.last().unwrap(), 1.0);
        assert!(top.auc < 0.5);
        assert!(top.curve.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(top.ndr, ndr(&t, &mask(&[8, 9]), 0.3).unwrap());
    }

    #[test]
    fn undefined_cases() {
        let t = table(&[0, 1, 2]);
        assert!(matches!(ndr(&t, &mask(&[]), 0.3), Err(Error::Undefined(_))));
        assert!(ndr(&t, &mask(&[5]), 0.3).is_err());
        assert!(ndr(&t, &mask(&[0]), 0.0).is_err());
        assert!(ndr(&t, &mask(&[0]), 1.0).is_ok());
    }

    #[test]
    fn random_scores_average_to_the_fraction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let flipped: Vec<u64> = (0..200).map(|i| i * 5).collect();
        let m = mask(&flipped);
        let mut perm: Vec<u64> = (0..1000).collect();
        let mut total = 0.0;
        for _ in 0..200 {
            perm.shuffle(&mut rng);
            total += ndr(&table(&perm), &m, 0.3).unwrap();
        }
        assert!((total / 200.0 - 0.3).abs() < 0.02);
    }

    #[test]
    fn monotone_in_fraction_and_under_clean_appends() {
        let scores: BTreeMap<u64, f64> = (0..40u64).map(|i| (i, ((i * 17) % 23) as f64)).collect();
        let t = ScoreTable::new("t", "Mean", "all", scores.clone()).unwrap();
        let m = mask(&[1, 4, 9, 16, 25]);
        let mut last = 0.0;
        for step in 1..=20 {
            let v = ndr(&t, &m, step as f64 / 20.0).unwrap();
            assert!(v >= last);
            last = v;
        }
        // appending a clean sample ranked last leaves the bottom-`count` set alone
        let mut more = scores;
        more.insert(1000, 1e9);
        let t2 = ScoreTable::new("t", "Mean", "all", more).unwrap();
        assert!(ndr(&t2, &m, 0.3).unwrap() >= ndr(&t, &m, 0.3).unwrap());
    }
}
