use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toytask::{ConfigId, RunResult};

/// Pairwise win fractions over matching (dataset, seed) runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub configs: Vec<ConfigId>,
    /// `wins[a][b]`: share of runs where `a` strictly beat `b`.
    pub wins: Vec<Vec<f64>>,
    /// Number of (dataset, seed) runs compared for every pair.
    pub runs: usize,
}

impl WinMatrix {
    pub fn index(&self, config: &ConfigId) -> Option<usize> {
        self.configs.binary_search(config).ok()
    }

    pub fn entry(&self, a: &ConfigId, b: &ConfigId) -> Option<f64> {
        Some(self.wins[self.index(a)?][self.index(b)?])
    }

    pub fn tie_mass(&self, a: usize, b: usize) -> f64 {
        1.0 - self.wins[a][b] - self.wins[b][a]
    }

    /// Mean win fraction of `a` against every other configuration.
    pub fn win_rate(&self, a: usize) -> f64 {
        let others = self.configs.len().saturating_sub(1);
        if others == 0 {
            return 0.0;
        }
        (0..self.configs.len()).filter(|&b| b != a).map(|b| self.wins[a][b]).sum::<f64>() / others as f64
    }
}

pub fn win_matrix(results: &[RunResult]) -> Result<WinMatrix> {
    let mut grid: BTreeMap<&ConfigId, BTreeMap<(&str, u64), f64>> = BTreeMap::new();
    for r in results {
        let runs = grid.entry(&r.config).or_default();
        if runs.insert((r.dataset.as_str(), r.seed), r.best_test_accuracy).is_some() {
            return Err(Error::MismatchedGrid(format!(
                "{} has two results for dataset {} seed {}",
                r.config, r.dataset, r.seed
            )));
        }
    }
    let keys: Option<BTreeSet<(&str, u64)>> = grid.values().next().map(|m| m.keys().copied().collect());
    for (config, runs) in &grid {
        if keys.as_ref().is_some_and(|k| !runs.keys().copied().eq(k.iter().copied())) {
            return Err(Error::MismatchedGrid(format!("{config} was not run on the common (dataset, seed) grid")));
        }
    }
    let runs = keys.map_or(0, |k| k.len());
    let accs: Vec<Vec<f64>> = grid.values().map(|m| m.values().copied().collect()).collect();
    let wins = accs
        .iter()
        .map(|a| {
            accs.iter()
                .map(|b| {
                    if runs == 0 {
                        0.0
                    } else {
                        a.iter().zip(b).filter(|(x, y)| x > y).count() as f64 / runs as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(WinMatrix {
        configs: grid.keys().map(|&c| c.clone()).collect(),
        wins,
        runs,
    })
}

/// Peels off successive non-dominated sets; `a` dominates `b` when
/// `a` beats `b` in at least `threshold` of the runs.
///
/// If a dominance cycle leaves no undominated configuration, everything
/// still unranked shares the current rank.
pub fn pareto_ranks(matrix: &WinMatrix, threshold: f64) -> Result<BTreeMap<ConfigId, usize>> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::invalid(format!("pareto threshold {threshold} outside (0.5, 1]")));
    }
    let n = matrix.configs.len();
    let mut remaining: BTreeSet<usize> = (0..n).collect();
    let mut ranks = BTreeMap::new();
    let mut rank = 1;
    while !remaining.is_empty() {
        let mut front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&b| !remaining.iter().any(|&a| a != b && matrix.wins[a][b] >= threshold))
            .collect();
        if front.is_empty() {
            front = remaining.iter().copied().collect();
        }
        for i in front {
            remaining.remove(&i);
            ranks.insert(matrix.configs[i].clone(), rank);
        }
        rank += 1;
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: &str, seed: u64, acc: f64) -> RunResult {
        RunResult {
            config: ConfigId(config.into()),
            dataset: "d".into(),
            seed,
            best_test_accuracy: acc,
        }
    }

    fn id(s: &str) -> ConfigId {
        ConfigId(s.into())
    }

    #[test]
    fn counting_wins() {
        let m = win_matrix(&[run("A", 0, 0.9), run("A", 1, 0.8), run("A", 2, 0.5), run("B", 0, 0.7), run("B", 1, 0.7), run("B", 2, 0.6)]).unwrap();
        assert_eq!(m.entry(&id("A"), &id("B")), Some(2.0 / 3.0));
        assert_eq!(m.entry(&id("B"), &id("A")), Some(1.0 / 3.0));
        assert_eq!(m.runs, 3);
    }

    #[test]
    fn ties_count_for_nobody() {
        let m = win_matrix(&[run("A", 0, 0.5), run("B", 0, 0.5), run("A", 1, 0.7), run("B", 1, 0.7)]).unwrap();
        assert_eq!(m.wins, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(m.tie_mass(0, 1), 1.0);
    }

    #[test]
    fn total_order_and_chain_ranks() {
        let results: Vec<RunResult> = ["A", "B", "C"]
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (0..4).map(move |s| run(c, s, 0.9 - i as f64 * 0.1)))
            .collect();
        let m = win_matrix(&results).unwrap();
        assert_eq!(m.entry(&id("A"), &id("B")), Some(1.0));
        assert_eq!(m.entry(&id("A"), &id("C")), Some(1.0));
        assert_eq!(m.entry(&id("B"), &id("C")), Some(1.0));
        let r = pareto_ranks(&m, 0.75).unwrap();
        assert_eq!(r[&id("A")], 1);
        assert_eq!(r[&id("B")], 2);
        assert_eq!(r[&id("C")], 3);
    }

    #[test]
    fn no_dominance_means_one_front() {
        let m = win_matrix(&[run("A", 0, 0.9), run("A", 1, 0.1), run("B", 0, 0.1), run("B", 1, 0.9)]).unwrap();
        assert!(pareto_ranks(&m, 0.75).unwrap().values().all(|&r| r == 1));
    }

    #[test]
    fn single_dominator() {
        let m = WinMatrix {
            configs: vec![id("A"), id("B"), id("C")],
            wins: vec![vec![0.0, 0.8, 0.9], vec![0.1, 0.0, 0.4], vec![0.0, 0.5, 0.0]],
            runs: 10,
        };
        let r = pareto_ranks(&m, 0.75).unwrap();
        assert_eq!(r.iter().filter(|(_, &v)| v == 1).count(), 1);
        assert_eq!(r[&id("A")], 1);
    }

    #[test]
    fn cycles_share_a_rank() {
        let m = WinMatrix {
            configs: vec![id("A"), id("B"), id("C")],
            wins: vec![vec![0.0, 0.8, 0.0], vec![0.0, 0.0, 0.8], vec![0.8, 0.0, 0.0]],
            runs: 5,
        };
        assert!(pareto_ranks(&m, 0.75).unwrap().values().all(|&r| r == 1));
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut results = vec![run("B", 0, 0.9), run("A", 0, 0.5), run("C", 0, 0.7), run("B", 1, 0.9), run("A", 1, 0.6), run("C", 1, 0.4)];
        let a = pareto_ranks(&win_matrix(&results).unwrap(), 0.75).unwrap();
        results.reverse();
        assert_eq!(pareto_ranks(&win_matrix(&results).unwrap(), 0.75).unwrap(), a);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(win_matrix(&[run("A", 0, 0.5), run("B", 1, 0.5)]), Err(Error::MismatchedGrid(_))));
        assert!(matches!(win_matrix(&[run("A", 0, 0.5), run("A", 0, 0.6)]), Err(Error::MismatchedGrid(_))));
        let m = win_matrix(&[run("A", 0, 0.5)]).unwrap();
        assert!(pareto_ranks(&m, 0.5).is_err());
        assert!(pareto_ranks(&m, 1.0).is_ok());
    }
}
