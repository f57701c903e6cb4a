use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, correct_prediction_mask, Aggregation, GroupSelection, ScoreTable, ValidationMask};
use crate::diagnostics::{ndr_curve_auc, per_parameter_cancellation, CancellationStats};
use crate::error::{Error, Result};
use crate::gradstore::{GradientStore, GroupId, SampleId, Split};
use crate::influence::{compute_influence, DataInfConfig, InfluenceOptions, InfluenceTensor, Method, TokenIndex};
use crate::seed;
use crate::toytask::{
    filter_and_retrain, generate_dataset, initial_model, inject_label_noise, per_sample_gradients, predict,
    removal_count, remove_and_retrain, select_checkpoint, train_from, ConfigId, GradientRequest, NoiseMask, RunResult,
    TokenDataset, ToyModel,
};

use super::config::{model_groups, PipelineConfig};
use super::report::{assemble, ReportBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
    /// Embedding-row methods paired with a non-embedding group.
    NotApplicable,
}

/// One (configuration, seed) cell of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub config: ConfigId,
    pub method: Method,
    pub aggregation: Aggregation,
    pub groups: GroupSelection,
    pub seed: u64,
    pub status: CellStatus,
    pub error: Option<String>,
    pub best_test_accuracy: Option<f64>,
    pub ndr: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub epoch: usize,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub error: Option<String>,
    pub flipped: usize,
    pub checkpoint: Option<CheckpointSummary>,
    /// Validation samples predicted correctly at the checkpoint.
    pub correct_validation: usize,
    pub cancellation: Vec<CancellationStats>,
}

/// Per-seed data kept out of the JSON report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub score_tables: Vec<ScoreTable>,
    pub removed: BTreeMap<ConfigId, BTreeSet<SampleId>>,
}

/// Extra scoring rule, run as its own configuration next to the baselines.
pub type ScoreHook = dyn Fn(&TokenDataset, &NoiseMask) -> Result<ScoreTable> + Sync;

#[derive(Default)]
pub struct PipelineHooks<'a> {
    pub extra_scores: Option<(ConfigId, &'a ScoreHook)>,
}

pub(crate) struct SeedOutcome {
    pub record: SeedRecord,
    pub cells: Vec<CellRecord>,
    pub baselines: Vec<RunResult>,
    pub artifacts: SeedArtifacts,
}

/// The applicable (method, aggregation, groups) grid, in config order.
pub fn sweep_grid(cfg: &PipelineConfig) -> Vec<(Method, Aggregation, GroupSelection)> {
    let mut grid = Vec::new();
    for &m in &cfg.methods {
        for &a in &cfg.aggregations {
            for g in &cfg.groups {
                grid.push((m, a, g.clone()));
            }
        }
    }
    grid
}

fn applicable(method: Method, groups: &GroupSelection) -> bool {
    !method.embedding_only() || matches!(groups, GroupSelection::All) || *groups == GroupSelection::Single(GroupId::we())
}

/// Uniformly random removal of the filtered fraction.
pub fn random_removal(dataset: &TokenDataset, fraction: f64, seed: u64) -> BTreeSet<SampleId> {
    let n = dataset.train.len();
    let mut rng = seed::rng(seed, "random-baseline");
    index::sample(&mut rng, n, removal_count(fraction, n))
        .into_iter()
        .map(|i| dataset.train[i].id)
        .collect()
}

/// Every flipped sample, topped up with random clean ones to the filtered
/// fraction of the whole training set.
pub fn full_removal(dataset: &TokenDataset, mask: &NoiseMask, fraction: f64, seed: u64) -> BTreeSet<SampleId> {
    let clean: Vec<SampleId> = dataset.train.iter().map(|s| s.id).filter(|&id| !mask.contains(id)).collect();
    let extra = removal_count(fraction, dataset.train.len()).saturating_sub(mask.len()).min(clean.len());
    let mut rng = seed::rng(seed, "full-baseline");
    let mut removed = mask.flipped.clone();
    removed.extend(index::sample(&mut rng, clean.len(), extra).into_iter().map(|i| clean[i]));
    removed
}

fn sub_store(store: &GradientStore, groups: &[GroupId]) -> Result<GradientStore> {
    let mut out = GradientStore::new(store.split, store.checkpoint_id.clone());
    out.note = store.note.clone();
    for g in groups {
        out.insert(store.block(g)?.clone())?;
    }
    Ok(out)
}

/// Groups the non-embedding methods need, in model order.
fn needed_groups(cfg: &PipelineConfig) -> Vec<GroupId> {
    let all = model_groups();
    if cfg.groups.contains(&GroupSelection::All) {
        return all;
    }
    all.into_iter()
        .filter(|g| cfg.groups.contains(&GroupSelection::Single(g.clone())))
        .collect()
}

struct Prepared {
    noisy: TokenDataset,
    mask: NoiseMask,
    init: ToyModel,
    train_grads: GradientStore,
    val_grads: GradientStore,
    tokens: TokenIndex,
    validation_mask: ValidationMask,
}

fn prepare(cfg: &PipelineConfig, seed: u64, record: &mut SeedRecord) -> Result<Prepared> {
    let clean = generate_dataset(&cfg.dataset, seed)?;
    let (noisy, mask) = inject_label_noise(&clean, cfg.noise_rate, seed)?;
    record.flipped = mask.len();

    let init = initial_model(&noisy, &cfg.model, seed)?;
    let series = train_from(init.clone(), &noisy.train, &noisy.validation, &cfg.training, seed)?;
    let ckpt = select_checkpoint(&series)?;
    record.checkpoint = Some(CheckpointSummary {
        epoch: ckpt.epoch,
        validation_loss: ckpt.validation_loss,
        validation_accuracy: ckpt.validation_accuracy,
    });

    let groups = model_groups();
    let we_tokens = noisy.present_tokens();
    let id = ckpt.id();
    let request = |split| GradientRequest {
        split,
        checkpoint_id: &id,
        groups: &groups,
        we_tokens: &we_tokens,
    };
    let train_grads = per_sample_gradients(&ckpt.model, &noisy.train, &request(Split::Train))?;
    let val_grads = per_sample_gradients(&ckpt.model, &noisy.validation, &request(Split::Validation))?;
    record.cancellation = train_grads.blocks().map(per_parameter_cancellation).collect::<Result<_>>()?;

    let labels: Vec<usize> = noisy.validation.iter().map(|s| s.label).collect();
    let validation_mask = correct_prediction_mask(&predict(&ckpt.model, &noisy.validation)?, &labels)?;
    record.correct_validation = validation_mask.count();

    let tokens = TokenIndex::new(
        noisy
            .train
            .iter()
            .chain(&noisy.validation)
            .map(|s| (s.id, s.tokens.as_slice())),
    );
    Ok(Prepared {
        noisy,
        mask,
        init,
        train_grads,
        val_grads,
        tokens,
        validation_mask,
    })
}

fn influence(cfg: &PipelineConfig, p: &Prepared, method: Method) -> Result<InfluenceTensor> {
    let opts = InfluenceOptions {
        datainf: DataInfConfig::new(cfg.lambda)?,
        top_k: cfg.top_k,
        tokens: Some(&p.tokens),
    };
    let groups = if method.embedding_only() {
        vec![GroupId::we()]
    } else {
        needed_groups(cfg)
    };
    let train = sub_store(&p.train_grads, &groups)?;
    let val = sub_store(&p.val_grads, &groups)?;
    compute_influence(&train, &val, method, cfg.tiling, &opts)
}

struct CellOutput {
    record: CellRecord,
    table: Option<ScoreTable>,
    removed: Option<BTreeSet<SampleId>>,
}

fn run_cell(
    cfg: &PipelineConfig,
    p: &Prepared,
    tensor: &InfluenceTensor,
    aggregation: Aggregation,
    groups: &GroupSelection,
    seed: u64,
) -> Result<(ScoreTable, f64, f64, f64, BTreeSet<SampleId>)> {
    let n = p.noisy.train.len();
    let vote_k = cfg.vote_k.unwrap_or_else(|| removal_count(cfg.filter_fraction, n).max(1));
    let table = aggregate(tensor, aggregation, groups, &p.validation_mask, vote_k)?;
    let config = ConfigId::new(tensor.method, aggregation, groups);
    let ndr = ndr_curve_auc(&table, &p.mask, cfg.filter_fraction)?;
    let out = filter_and_retrain(&p.noisy, &p.init, &table, config, cfg.filter_fraction, &cfg.training, seed)?;
    Ok((table, out.result.best_test_accuracy, ndr.ndr, ndr.auc, out.removed))
}

fn method_cells(cfg: &PipelineConfig, p: &Prepared, method: Method, seed: u64) -> Vec<CellOutput> {
    let tensor = influence(cfg, p, method);
    let combos: Vec<(Aggregation, GroupSelection)> = cfg
        .aggregations
        .iter()
        .flat_map(|&a| cfg.groups.iter().map(move |g| (a, g.clone())))
        .collect();
    combos
        .into_par_iter()
        .map(|(aggregation, groups)| {
            let mut record = CellRecord {
                config: ConfigId::new(method, aggregation, &groups),
                method,
                aggregation,
                groups: groups.clone(),
                seed,
                status: CellStatus::Ok,
                error: None,
                best_test_accuracy: None,
                ndr: None,
                auc: None,
            };
            if !applicable(method, &groups) {
                record.status = CellStatus::NotApplicable;
                return CellOutput {
                    record,
                    table: None,
                    removed: None,
                };
            }
            let result = tensor
                .as_ref()
                .map_err(|e| Error::invalid(format!("influence: {e}")))
                .and_then(|t| run_cell(cfg, p, t, aggregation, &groups, seed));
            match result {
                Ok((table, acc, ndr, auc, removed)) => {
                    record.best_test_accuracy = Some(acc);
                    record.ndr = Some(ndr);
                    record.auc = Some(auc);
                    CellOutput {
                        record,
                        table: Some(table),
                        removed: Some(removed),
                    }
                }
                Err(e) => {
                    log::warn!("{} seed {seed} failed: {e}", record.config);
                    record.status = CellStatus::Failed;
                    record.error = Some(e.to_string());
                    CellOutput {
                        record,
                        table: None,
                        removed: None,
                    }
                }
            }
        })
        .collect()
}

fn failed_cells(cfg: &PipelineConfig, seed: u64, error: &str) -> Vec<CellRecord> {
    sweep_grid(cfg)
        .into_iter()
        .map(|(method, aggregation, groups)| {
            let ok = applicable(method, &groups);
            CellRecord {
                config: ConfigId::new(method, aggregation, &groups),
                method,
                aggregation,
                groups,
                seed,
                status: if ok { CellStatus::Failed } else { CellStatus::NotApplicable },
                error: ok.then(|| error.to_string()),
                best_test_accuracy: None,
                ndr: None,
                auc: None,
            }
        })
        .collect()
}

fn baselines(cfg: &PipelineConfig, p: &Prepared, seed: u64, hooks: &PipelineHooks<'_>) -> Result<Vec<(RunResult, BTreeSet<SampleId>)>> {
    let plans: Vec<(ConfigId, BTreeSet<SampleId>)> = vec![
        (ConfigId::random(), random_removal(&p.noisy, cfg.filter_fraction, seed)),
        (ConfigId::full(), full_removal(&p.noisy, &p.mask, cfg.filter_fraction, seed)),
    ];
    let hooked = match &hooks.extra_scores {
        Some((id, hook)) => Some((id.clone(), hook(&p.noisy, &p.mask)?)),
        None => None,
    };
    let mut out: Vec<(RunResult, BTreeSet<SampleId>)> = plans
        .into_par_iter()
        .map(|(id, removed)| {
            let o = remove_and_retrain(&p.noisy, &p.init, removed, id, &cfg.training, seed)?;
            Ok((o.result, o.removed))
        })
        .collect::<Result<_>>()?;
    if let Some((id, table)) = hooked {
        let o = filter_and_retrain(&p.noisy, &p.init, &table, id, cfg.filter_fraction, &cfg.training, seed)?;
        out.push((o.result, o.removed));
    }
    Ok(out)
}

pub(crate) fn run_seed(cfg: &PipelineConfig, seed: u64, hooks: &PipelineHooks<'_>) -> SeedOutcome {
    let mut record = SeedRecord {
        seed,
        error: None,
        flipped: 0,
        checkpoint: None,
        correct_validation: 0,
        cancellation: Vec::new(),
    };
    let mut artifacts = SeedArtifacts {
        seed,
        ..SeedArtifacts::default()
    };
    let p = match prepare(cfg, seed, &mut record) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("seed {seed} failed before influence: {e}");
            let msg = e.to_string();
            record.error = Some(msg.clone());
            return SeedOutcome {
                record,
                cells: failed_cells(cfg, seed, &msg),
                baselines: Vec::new(),
                artifacts,
            };
        }
    };
    log::info!("seed {seed}: checkpoint ready, running {} methods", cfg.methods.len());

    let outputs: Vec<CellOutput> = cfg
        .methods
        .par_iter()
        .flat_map_iter(|&m| method_cells(cfg, &p, m, seed))
        .collect();
    let mut cells = Vec::with_capacity(outputs.len());
    for o in outputs {
        if let Some(t) = o.table {
            artifacts.score_tables.push(t);
        }
        if let Some(r) = o.removed {
            artifacts.removed.insert(o.record.config.clone(), r);
        }
        cells.push(o.record);
    }
    let baselines = match baselines(cfg, &p, seed, hooks) {
        Ok(b) => b
            .into_iter()
            .map(|(r, removed)| {
                artifacts.removed.insert(r.config.clone(), removed);
                r
            })
            .collect(),
        Err(e) => {
            log::warn!("seed {seed} baselines failed: {e}");
            record.error = Some(format!("baselines: {e}"));
            Vec::new()
        }
    };
    SeedOutcome {
        record,
        cells,
        baselines,
        artifacts,
    }
}

/// Runs every stage for every seed and assembles the report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ReportBundle> {
    run_pipeline_with(cfg, &PipelineHooks::default())
}

pub fn run_pipeline_with(cfg: &PipelineConfig, hooks: &PipelineHooks<'_>) -> Result<ReportBundle> {
    cfg.validate()?;
    let outcomes: Vec<SeedOutcome> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, hooks)).collect();
    Ok(assemble(cfg, outcomes))
}
