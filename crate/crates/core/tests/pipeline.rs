use std::collections::BTreeMap;

use layerscope::aggregate::{Aggregation, GroupSelection};
use layerscope::pipeline::{emit_reports, run_pipeline, run_pipeline_with, CellStatus, PipelineHooks, ScoreHook};
use layerscope::toytask::{generate_dataset, inject_label_noise, SplitSizes, TrainConfig};
use layerscope::{ConfigId, Error, GroupId, Method, PipelineConfig, ScoreTable};

fn small() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.dataset.vocab_size = 20;
    c.dataset.sizes = SplitSizes {
        train: 60,
        validation: 20,
        test: 20,
    };
    c.training = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    c.methods = vec![Method::TracIn];
    c.aggregations = vec![Aggregation::Mean];
    c.groups = vec![GroupSelection::Single(GroupId::cl())];
    c.seeds = vec![1, 2];
    c
}

#[test]
fn cardinality() {
    let b = run_pipeline(&small()).unwrap();
    assert_eq!(b.cells.len(), 2);
    assert!(b.cells.iter().all(|c| c.status == CellStatus::Ok));
    assert_eq!(b.baselines.len(), 4);
    assert_eq!(b.failures(), 0);
    assert_eq!(b.summary.iter().filter(|r| !r.config.is_baseline()).count(), 1);
}

#[test]
fn grid_is_the_cartesian_product() {
    let mut c = small();
    c.methods = vec![Method::TracIn, Method::TracInWE];
    c.aggregations = vec![Aggregation::Mean, Aggregation::Vote];
    c.groups = vec![GroupSelection::Single(GroupId::cl()), GroupSelection::All];
    let b = run_pipeline(&c).unwrap();
    assert_eq!(b.cells.len(), 2 * 2 * 2 * 2);
    let na: Vec<_> = b.cells.iter().filter(|c| c.status == CellStatus::NotApplicable).collect();
    assert_eq!(na.len(), 4);
    assert!(na.iter().all(|c| c.method == Method::TracInWE && c.groups != GroupSelection::All));
    assert_eq!(b.summary.iter().filter(|r| !r.config.is_baseline()).count(), 6);
}

#[test]
fn identical_configs_give_identical_reports() {
    let a = run_pipeline(&small()).unwrap().to_json().unwrap();
    let b = run_pipeline(&small()).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    assert!(a.contains("\"config\""));
}

#[test]
fn oracle_scores_reproduce_full_removal() {
    let oracle: &ScoreHook = &|ds, mask| {
        let scores: BTreeMap<_, _> = ds.train.iter().map(|s| (s.id, if mask.contains(s.id) { -1.0 } else { 1.0 })).collect();
        ScoreTable::new("Oracle", "Mean", "all", scores)
    };
    let hooks = PipelineHooks {
        extra_scores: Some((ConfigId("Oracle".into()), oracle)),
    };
    // filtering exactly the noise rate: oracle and Full remove the same set
    let mut c = small();
    c.filter_fraction = c.noise_rate;
    let b = run_pipeline_with(&c, &hooks).unwrap();
    for a in &b.artifacts {
        assert_eq!(a.removed[&ConfigId("Oracle".into())], a.removed[&ConfigId::full()]);
    }
    // above it, both contain every flipped sample
    let c = small();
    let b = run_pipeline_with(&c, &hooks).unwrap();
    for a in &b.artifacts {
        let clean = generate_dataset(&c.dataset, a.seed).unwrap();
        let (_, mask) = inject_label_noise(&clean, c.noise_rate, a.seed).unwrap();
        let oracle = &a.removed[&ConfigId("Oracle".into())];
        let full = &a.removed[&ConfigId::full()];
        assert_eq!(oracle.len(), 18);
        assert_eq!(full.len(), 18);
        assert!(mask.flipped.is_subset(oracle) && mask.flipped.is_subset(full));
    }
}

#[test]
fn random_baseline_ignores_training_hyperparameters() {
    let mut other = small();
    other.training.learning_rate = 0.1;
    let a = run_pipeline(&small()).unwrap();
    let b = run_pipeline(&other).unwrap();
    for (x, y) in a.artifacts.iter().zip(&b.artifacts) {
        assert_eq!(x.removed[&ConfigId::random()], y.removed[&ConfigId::random()]);
    }
}

#[test]
fn failures_are_isolated() {
    let mut c = small();
    c.training.learning_rate = 1e308;
    let b = run_pipeline(&c).unwrap();
    assert_eq!(b.failures(), 4);
    assert!(b.cells.iter().all(|c| c.status == CellStatus::Failed));
    assert!(b.seeds.iter().all(|s| s.error.as_deref().is_some_and(|e| e.contains("diverged") || e.contains("epoch"))));
}

#[test]
fn empty_seeds_are_rejected() {
    let mut c = small();
    c.seeds.clear();
    assert!(matches!(run_pipeline(&c), Err(Error::Config(_))));
}

#[test]
fn emission_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let b = run_pipeline(&small()).unwrap();
    let files = emit_reports(&b, dir.path(), false).unwrap();
    assert_eq!(files.len(), 4);
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("TracIn/Mean/CL"));
    let csv = std::fs::read(dir.path().join("scores/seed-1.csv")).unwrap();
    let tables = ScoreTable::read_csv(&csv[..]).unwrap();
    assert_eq!(tables.len(), 1);
    assert_eq!(tables[0].len(), 60);
    assert!(matches!(emit_reports(&b, dir.path(), false), Err(Error::OutputExists(_))));
    emit_reports(&b, dir.path(), true).unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
}
