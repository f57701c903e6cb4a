use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregation, GroupSelection};
use crate::diagnostics::{pareto_ranks, spearman, win_matrix, Spearman, WinMatrix};
use crate::error::{Error, Result};
use crate::gradstore::GroupId;
use crate::influence::Method;
use crate::toytask::{ConfigId, RunResult};

use super::config::PipelineConfig;
use super::run::{CellRecord, CellStatus, SeedArtifacts, SeedOutcome, SeedRecord};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SCORES_DIR: &str = "scores";

/// Per-parameter cancellation of one group, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancellationRow {
    pub group: GroupId,
    pub seeds: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub fraction_infinite: f64,
    #[serde(with = "crate::floats::option")]
    pub group_value: Option<f64>,
}

/// Rank correlation between group cancellation and the accuracy reached
/// by filtering on that group, pooled over (seed, group) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub method: Method,
    pub aggregation: Aggregation,
    pub pairs: usize,
    pub spearman: Option<Spearman>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub rank: Option<usize>,
    pub config: ConfigId,
    pub win_rate: Option<f64>,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ndr_mean: Option<f64>,
    pub auc_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config: PipelineConfig,
    pub seeds: Vec<SeedRecord>,
    pub cells: Vec<CellRecord>,
    pub baselines: Vec<RunResult>,
    pub cancellation: Vec<CancellationRow>,
    pub cancellation_correlation: Vec<CorrelationRecord>,
    pub win_matrix: Option<WinMatrix>,
    /// Configurations left out of the tournament for missing runs.
    pub excluded_from_ranking: Vec<ConfigId>,
    pub pareto_ranks: BTreeMap<ConfigId, usize>,
    pub summary: Vec<SummaryRow>,
    #[serde(skip)]
    pub artifacts: Vec<SeedArtifacts>,
}

impl ReportBundle {
    /// Failed cells plus seeds whose shared stages failed.
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
            + self.seeds.iter().filter(|s| s.error.is_some()).count()
    }

    /// Every successful result, baselines included.
    pub fn results(&self) -> Vec<RunResult> {
        let dataset = &self.config.dataset.name;
        self.cells
            .iter()
            .filter_map(|c| {
                Some(RunResult {
                    config: c.config.clone(),
                    dataset: dataset.clone(),
                    seed: c.seed,
                    best_test_accuracy: c.best_test_accuracy?,
                })
            })
            .chain(self.baselines.iter().cloned())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = mean(values.iter().copied()).unwrap_or(0.0);
    let var = mean(values.iter().map(|v| (v - m) * (v - m))).unwrap_or(0.0);
    (m, var.sqrt())
}

fn cancellation_rows(seeds: &[SeedRecord]) -> Vec<CancellationRow> {
    let mut by_group: BTreeMap<&GroupId, Vec<&crate::diagnostics::CancellationStats>> = BTreeMap::new();
    let mut order: Vec<&GroupId> = Vec::new();
    for s in seeds {
        for c in &s.cancellation {
            if !by_group.contains_key(&c.group) {
                order.push(&c.group);
            }
            by_group.entry(&c.group).or_default().push(c);
        }
    }
    order
        .into_iter()
        .map(|g| {
            let stats = &by_group[g];
            CancellationRow {
                group: g.clone(),
                seeds: stats.len(),
                mean: mean(stats.iter().filter_map(|s| s.mean)),
                std: mean(stats.iter().filter_map(|s| s.std)),
                median: mean(stats.iter().filter_map(|s| s.median)),
                min: mean(stats.iter().filter_map(|s| s.min)),
                max: mean(stats.iter().filter_map(|s| s.max)),
                fraction_infinite: mean(stats.iter().map(|s| s.fraction_infinite)).unwrap_or(0.0),
                group_value: mean(stats.iter().map(|s| s.group_value)),
            }
        })
        .collect()
}

fn correlations(cfg: &PipelineConfig, seeds: &[SeedRecord], cells: &[CellRecord]) -> Vec<CorrelationRecord> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &aggregation in &cfg.aggregations {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for s in seeds {
                for c in &s.cancellation {
                    let groups = GroupSelection::Single(c.group.clone());
                    let acc = cells.iter().find(|r| {
                        r.seed == s.seed && r.method == method && r.aggregation == aggregation && r.groups == groups
                    });
                    if let Some(acc) = acc.and_then(|r| r.best_test_accuracy) {
                        if c.group_value.is_finite() {
                            xs.push(c.group_value);
                            ys.push(acc);
                        }
                    }
                }
            }
            if xs.is_empty() {
                continue;
            }
            let (spearman, error) = match spearman(&xs, &ys) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(CorrelationRecord {
                method,
                aggregation,
                pairs: xs.len(),
                spearman,
                error,
            });
        }
    }
    out
}

pub(crate) fn assemble(cfg: &PipelineConfig, outcomes: Vec<SeedOutcome>) -> ReportBundle {
    let mut bundle = ReportBundle {
        config: cfg.clone(),
        seeds: Vec::new(),
        cells: Vec::new(),
        baselines: Vec::new(),
        cancellation: Vec::new(),
        cancellation_correlation: Vec::new(),
        win_matrix: None,
        excluded_from_ranking: Vec::new(),
        pareto_ranks: BTreeMap::new(),
        summary: Vec::new(),
        artifacts: Vec::new(),
    };
    for o in outcomes {
        bundle.seeds.push(o.record);
        bundle.cells.extend(o.cells);
        bundle.baselines.extend(o.baselines);
        bundle.artifacts.push(o.artifacts);
    }
    bundle.cancellation = cancellation_rows(&bundle.seeds);
    bundle.cancellation_correlation = correlations(cfg, &bundle.seeds, &bundle.cells);

    // Configurations, in first-seen order; not-applicable cells don't count.
    let mut configs: Vec<ConfigId> = Vec::new();
    for c in &bundle.cells {
        if c.status != CellStatus::NotApplicable && !configs.contains(&c.config) {
            configs.push(c.config.clone());
        }
    }
    for b in &bundle.baselines {
        if !configs.contains(&b.config) {
            configs.push(b.config.clone());
        }
    }
    let results = bundle.results();
    let grid: BTreeSet<(&str, u64)> = results.iter().map(|r| (r.dataset.as_str(), r.seed)).collect();
    let mut per_config: BTreeMap<&ConfigId, Vec<&RunResult>> = BTreeMap::new();
    for r in &results {
        per_config.entry(&r.config).or_default().push(r);
    }
    let complete: BTreeSet<&ConfigId> = configs
        .iter()
        .filter(|c| per_config.get(c).is_some_and(|rs| rs.len() == grid.len()))
        .collect();
    bundle.excluded_from_ranking = configs.iter().filter(|c| !complete.contains(c)).cloned().collect();
    let ranked: Vec<RunResult> = results.iter().filter(|r| complete.contains(&r.config)).cloned().collect();
    match win_matrix(&ranked) {
        Ok(m) => {
            bundle.pareto_ranks = pareto_ranks(&m, cfg.pareto_threshold).unwrap_or_default();
            bundle.win_matrix = Some(m);
        }
        Err(e) => log::warn!("no win matrix: {e}"),
    }

    let mut rows: Vec<SummaryRow> = configs
        .iter()
        .map(|c| {
            let accs: Vec<f64> = per_config
                .get(c)
                .map(|rs| rs.iter().map(|r| r.best_test_accuracy).collect())
                .unwrap_or_default();
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            let mine = || bundle.cells.iter().filter(move |r| &r.config == c);
            let win_rate = bundle
                .win_matrix
                .as_ref()
                .and_then(|m| m.index(c).map(|i| m.win_rate(i)));
            SummaryRow {
                rank: bundle.pareto_ranks.get(c).copied(),
                config: c.clone(),
                win_rate,
                runs: accs.len(),
                accuracy_mean,
                accuracy_std,
                ndr_mean: mean(mine().filter_map(|r| r.ndr)),
                auc_mean: mean(mine().filter_map(|r| r.auc)),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &SummaryRow| r.rank.unwrap_or(usize::MAX);
        key(a)
            .cmp(&key(b))
            .then(b.win_rate.unwrap_or(-1.0).total_cmp(&a.win_rate.unwrap_or(-1.0)))
            .then(b.accuracy_mean.total_cmp(&a.accuracy_mean))
            .then(a.config.cmp(&b.config))
    });
    bundle.summary = rows;
    bundle
}

fn opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.digits$}"),
        None => "-".into(),
    }
}

/// Plain-text ranking table followed by the cancellation table.
pub fn summary_text(bundle: &ReportBundle) -> String {
    let cfg = &bundle.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "dataset {}: {} seeds, noise rate {}, filter fraction {}, pareto threshold {}",
        cfg.dataset.name,
        cfg.seeds.len(),
        cfg.noise_rate,
        cfg.filter_fraction,
        cfg.pareto_threshold
    );
    let width = bundle.summary.iter().map(|r| r.config.as_str().len()).max().unwrap_or(6).max(6);
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<5} {:<width$} {:>8} {:>17} {:>6} {:>6}", "rank", "config", "win_rate", "accuracy", "ndr", "auc");
    for r in &bundle.summary {
        let _ = writeln!(
            s,
            "{:<5} {:<width$} {:>8} {:>17} {:>6} {:>6}",
            r.rank.map_or("-".into(), |v| v.to_string()),
            r.config.as_str(),
            opt(r.win_rate, 3),
            format!("{:.4} ± {:.4}", r.accuracy_mean, r.accuracy_std),
            opt(r.ndr_mean, 3),
            opt(r.auc_mean, 3),
        );
    }
    let failures = bundle.failures();
    if failures > 0 {
        let _ = writeln!(s, "\n{failures} failed cells or seeds; see report.json");
    }
    let _ = writeln!(s, "\ncancellation of training gradients at the selected checkpoint (mean over seeds)");
    let _ = writeln!(
        s,
        "{:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>10}",
        "group", "mean", "std", "median", "min", "max", "inf", "C"
    );
    for r in &bundle.cancellation {
        let _ = writeln!(
            s,
            "{:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8.4} {:>10}",
            r.group.as_str(),
            opt(r.mean, 3),
            opt(r.std, 3),
            opt(r.median, 3),
            opt(r.min, 3),
            opt(r.max, 3),
            r.fraction_infinite,
            opt(r.group_value, 3),
        );
    }
    if !bundle.cancellation_correlation.is_empty() {
        let _ = writeln!(s, "\nspearman rho of group cancellation vs accuracy (* = not significant)");
        for c in &bundle.cancellation_correlation {
            let cell = match &c.spearman {
                Some(r) => format!("{:.3}{}", r.rho, if r.significant { "" } else { "*" }),
                None => "-".into(),
            };
            let _ = writeln!(s, "{}/{}: {cell} over {} pairs", c.method, c.aggregation, c.pairs);
        }
    }
    s
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    Ok(!dir.exists() || fs::read_dir(dir)?.next().is_none())
}

/// Writes `report.json`, `summary.txt` and one score CSV per seed.
/// A non-empty `out_dir` is refused unless `overwrite` is set.
pub fn emit_reports(bundle: &ReportBundle, out_dir: &Path, overwrite: bool) -> Result<Vec<PathBuf>> {
    if !is_empty_dir(out_dir)? {
        if !overwrite {
            return Err(Error::OutputExists(out_dir.to_path_buf()));
        }
        let scores = out_dir.join(SCORES_DIR);
        if scores.is_dir() {
            fs::remove_dir_all(scores)?;
        }
    }
    fs::create_dir_all(out_dir.join(SCORES_DIR))?;
    let mut written = Vec::new();
    let report = out_dir.join(REPORT_FILE);
    fs::write(&report, bundle.to_json()?)?;
    written.push(report);
    let summary = out_dir.join(SUMMARY_FILE);
    fs::write(&summary, summary_text(bundle))?;
    written.push(summary);
    for a in &bundle.artifacts {
        let path = out_dir.join(SCORES_DIR).join(format!("seed-{}.csv", a.seed));
        let mut w = csv::Writer::from_path(&path)?;
        for t in &a.score_tables {
            t.write_csv(&mut w)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
