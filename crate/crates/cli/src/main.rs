use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use layerscope::aggregate::{aggregate, correct_prediction_mask, GroupSelection, ScoreTable};
use layerscope::diagnostics::{pareto_ranks, win_matrix, WinMatrix};
use layerscope::gradstore::{read_gradient_dump, write_gradient_dump};
use layerscope::influence::{compute_influence, read_tensor_dump, write_tensor_dump, DataInfConfig, InfluenceOptions, TokenIndex};
use layerscope::pipeline::{emit_reports, full_removal, model_groups, random_removal, run_pipeline, summary_text};
use layerscope::theory::{build_counterexample, verify_separation, CounterexampleReport};
use layerscope::toytask::{
    filter_and_retrain, generate_dataset, initial_model, inject_label_noise, per_sample_gradients, predict, read_jsonl, removal_count,
    remove_and_retrain, select_checkpoint, train_from, write_jsonl, Checkpoint, ConfigId,
    GradientRequest, NoiseMask, RunResult, TokenDataset, ToyModel,
};
use layerscope::{Error, Method, PipelineConfig, SampleId, Split};

#[derive(Parser)]
#[command(name = "layerscope", version, about = "Layer-wise training-data influence and noisy-label filtering")]
struct Cli {
    /// TOML pipeline config; stage commands fall back to the one saved by `synth`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replace existing artifacts.
    #[arg(long, global = true)]
    overwrite: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Stage {
    /// Stage directory; every stage reads its inputs from and writes its artifact to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
    Full,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: generate the dataset and flip labels.
    Synth(Stage),
    /// Stage 2: train and keep the lowest-validation-loss checkpoint.
    Train(Stage),
    /// Stage 3a: per-sample gradients of the checkpoint.
    Grads(Stage),
    /// Stage 3b: influence tensors.
    Influence {
        #[command(flatten)]
        stage: Stage,
        /// Methods to compute (default: those in the config).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Stage 4: aggregate every tensor into score tables.
    Aggregate(Stage),
    /// Stage 5: filter the lowest-scoring samples and retrain.
    Filter(Stage),
    /// Retrain the Random and Full baselines.
    Retrain {
        #[command(flatten)]
        stage: Stage,
        #[arg(long, value_enum, default_value = "all")]
        baseline: Baseline,
    },
    /// Win matrix, Pareto ranks and summary over stage results.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Stage directories holding results (default: --out).
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
    /// Check the cancellation counterexample construction.
    TheoryCheck {
        #[arg(long, value_delimiter = ',', default_values_t = [1e-2, 1e-4, 1e-6])]
        epsilon: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: u64,
    },
    /// Every stage for every seed, plus the report bundle.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

const CONFIG_FILE: &str = "config.toml";
const DATASET_FILE: &str = "dataset.jsonl";
const NOISE_FILE: &str = "noise.json";
const INIT_FILE: &str = "init.json";
const SERIES_FILE: &str = "checkpoints.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const SCORES_FILE: &str = "scores.csv";
const RESULTS_FILE: &str = "results.json";
const REMOVED_FILE: &str = "removed.json";
const BASELINES_FILE: &str = "baselines.json";

/// Outcome short of an error: some cells or trials failed.
struct Partial;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Partial)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<Option<Partial>> {
    match &cli.command {
        Command::Synth(s) => synth(cli, &s.out),
        Command::Train(s) => train(cli, &s.out),
        Command::Grads(s) => grads(cli, &s.out),
        Command::Influence { stage, methods } => influence(cli, &stage.out, methods.as_deref()),
        Command::Aggregate(s) => aggregate_stage(cli, &s.out),
        Command::Filter(s) => filter(cli, &s.out),
        Command::Retrain { stage, baseline } => retrain(cli, &stage.out, *baseline),
        Command::Report { out, inputs } => report(cli, out, inputs),
        Command::TheoryCheck { epsilon, trials } => theory_check(epsilon, *trials),
        Command::Pipeline { out } => pipeline(cli, out),
    }
    .map(|partial| partial.then_some(Partial))
}

fn load_config(cli: &Cli, stage: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    let saved = stage.map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let mut cfg = match (&cli.config, saved) {
        (Some(p), _) => PipelineConfig::load(p)?,
        (None, Some(p)) => PipelineConfig::load(&p)?,
        (None, None) => PipelineConfig::default(),
    };
    if let Some(seeds) = &cli.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The one seed a stage command works on.
fn stage_seed(cfg: &PipelineConfig) -> anyhow::Result<u64> {
    match cfg.seeds.as_slice() {
        [seed] => Ok(*seed),
        [first, ..] => {
            log::info!("stage commands run one seed; using {first}");
            Ok(*first)
        }
        [] => Err(Error::Config("no seeds".into()).into()),
    }
}

fn guard(path: &Path, overwrite: bool) -> anyhow::Result<()> {
    if path.exists() {
        if !overwrite {
            bail!("{} already exists (pass --overwrite to replace it)", path.display());
        }
        if path.is_dir() {
            fs::remove_dir_all(path)?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8], overwrite: bool) -> anyhow::Result<()> {
    guard(path, overwrite)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T, overwrite: bool) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes(), overwrite)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(cfg: &PipelineConfig, dir: &Path) -> anyhow::Result<TokenDataset> {
    let path = dir.join(DATASET_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path).into());
    }
    let spec = &cfg.dataset;
    Ok(read_jsonl(&path, &spec.name, spec.vocab_size, spec.num_classes)?)
}

fn synth(cli: &Cli, dir: &Path) -> anyhow::Result<bool> {
    let mut cfg = load_config(cli, None)?;
    let seed = stage_seed(&cfg)?;
    cfg.seeds = vec![seed];
    let clean = generate_dataset(&cfg.dataset, seed)?;
    let (noisy, mask) = inject_label_noise(&clean, cfg.noise_rate, seed)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes(), cli.overwrite)?;
    guard(&dir.join(DATASET_FILE), cli.overwrite)?;
    write_jsonl(&noisy, &dir.join(DATASET_FILE))?;
    println!("wrote {}", dir.join(DATASET_FILE).display());
    write_json(&dir.join(NOISE_FILE), &mask, cli.overwrite)?;
    println!("seed {seed}: {} training labels flipped", mask.len());
    Ok(false)
}

fn train(cli: &Cli, dir: &Path) -> anyhow::Result<bool> {
    let cfg = load_config(cli, Some(dir))?;
    let seed = stage_seed(&cfg)?;
    let ds = load_dataset(&cfg, dir)?;
    let init = initial_model(&ds, &cfg.model, seed)?;
    let series = train_from(init.clone(), &ds.train, &ds.validation, &cfg.training, seed)?;
    let best = select_checkpoint(&series)?;
    println!(
        "selected {} (validation loss {:.4}, accuracy {:.4})",
        best.id(),
        best.validation_loss,
        best.validation_accuracy
    );
    write_json(&dir.join(INIT_FILE), &init, cli.overwrite)?;
    write_json(&dir.join(CHECKPOINT_FILE), best, cli.overwrite)?;
    write_json(&dir.join(SERIES_FILE), &series, cli.overwrite)?;
    Ok(false)
}

fn grads(cli: &Cli, dir: &Path) -> anyhow::Result<bool> {
    let cfg = load_config(cli, Some(dir))?;
    let ds = load_dataset(&cfg, dir)?;
    let ckpt: Checkpoint = read_json(&dir.join(CHECKPOINT_FILE))?;
    let groups = model_groups();
    let tokens = ds.present_tokens();
    let id = ckpt.id();
    for (split, name, samples) in [(Split::Train, "train", &ds.train), (Split::Validation, "validation", &ds.validation)] {
        let req = GradientRequest {
            split,
            checkpoint_id: &id,
            groups: &groups,
            we_tokens: &tokens,
        };
        let store = per_sample_gradients(&ckpt.model, samples, &req)?;
        let out = dir.join("grads").join(name);
        guard(&out, cli.overwrite)?;
        write_gradient_dump(&store, &out)?;
        println!("wrote {}", out.display());
    }
    Ok(false)
}

fn token_index(ds: &TokenDataset) -> TokenIndex {
    TokenIndex::new(ds.train.iter().chain(&ds.validation).map(|s| (s.id, s.tokens.as_slice())))
}

fn influence(cli: &Cli, dir: &Path, methods: Option<&[Method]>) -> anyhow::Result<bool> {
    let cfg = load_config(cli, Some(dir))?;
    let ds = load_dataset(&cfg, dir)?;
    let train = read_gradient_dump(&dir.join("grads/train"))?;
    let val = read_gradient_dump(&dir.join("grads/validation"))?;
    let index = token_index(&ds);
    let opts = InfluenceOptions {
        datainf: DataInfConfig::new(cfg.lambda)?,
        top_k: cfg.top_k,
        tokens: Some(&index),
    };
    for &m in methods.unwrap_or(&cfg.methods) {
        let tensor = compute_influence(&train, &val, m, cfg.tiling, &opts)?;
        let out = dir.join("influence").join(m.name());
        guard(&out, cli.overwrite)?;
        write_tensor_dump(&tensor, &out)?;
        println!("wrote {} ({} zero-norm pairs)", out.display(), tensor.zero_norm_pairs);
    }
    Ok(false)
}

fn aggregate_stage(cli: &Cli, dir: &Path) -> anyhow::Result<bool> {
    let cfg = load_config(cli, Some(dir))?;
    let ds = load_dataset(&cfg, dir)?;
    let ckpt: Checkpoint = read_json(&dir.join(CHECKPOINT_FILE))?;
    let labels: Vec<usize> = ds.validation.iter().map(|s| s.label).collect();
    let mask = correct_prediction_mask(&predict(&ckpt.model, &ds.validation)?, &labels)?;
    let vote_k = cfg.vote_k.unwrap_or_else(|| removal_count(cfg.filter_fraction, ds.train.len()).max(1));
    let mut tables = Vec::new();
    let mut partial = false;
    for &m in &cfg.methods {
        let tdir = dir.join("influence").join(m.name());
        if !tdir.is_dir() {
            log::warn!("no influence tensor for {m}; skipping");
            continue;
        }
        let tensor = read_tensor_dump(&tdir)?;
        for &a in &cfg.aggregations {
            for g in &cfg.groups {
                if let GroupSelection::Single(id) = g {
                    if !tensor.groups.contains(id) {
                        continue;
                    }
                }
                match aggregate(&tensor, a, g, &mask, vote_k) {
                    Ok(t) => tables.push(t),
                    Err(e) => {
                        eprintln!("{m}/{a}/{g}: {e}");
                        partial = true;
                    }
                }
            }
        }
    }
    if tables.is_empty() {
        bail!("no score tables produced; run `influence` first");
    }
    let path = dir.join(SCORES_FILE);
    guard(&path, cli.overwrite)?;
    let mut w = csv::Writer::from_path(&path)?;
    for t in &tables {
        t.write_csv(&mut w)?;
    }
    w.flush()?;
    println!("wrote {} ({} tables)", path.display(), tables.len());
    Ok(partial)
}

fn load_init(dir: &Path) -> anyhow::Result<ToyModel> {
    read_json(&dir.join(INIT_FILE))
}

fn filter(cli: &Cli, dir: &Path) -> anyhow::Result<bool> {
    let cfg = load_config(cli, Some(dir))?;
    let seed = stage_seed(&cfg)?;
    let ds = load_dataset(&cfg, dir)?;
    let init = load_init(dir)?;
    let path = dir.join(SCORES_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path).into());
    }
    let tables = ScoreTable::read_csv(fs::File::open(&path)?)?;
    let mut results = Vec::new();
    let mut removed: BTreeMap<ConfigId, BTreeSet<SampleId>> = BTreeMap::new();
    let mut partial = false;
    for t in &tables {
        let id = ConfigId(format!("{}/{}/{}", t.method, t.aggregation, t.groups));
        match filter_and_retrain(&ds, &init, t, id.clone(), cfg.filter_fraction, &cfg.training, seed) {
            Ok(o) => {
                println!("{id}: best test accuracy {:.4}", o.result.best_test_accuracy);
                results.push(o.result);
                removed.insert(id, o.removed);
            }
            Err(e) => {
                eprintln!("{id}: {e}");
                partial = true;
            }
        }
    }
    write_json(&dir.join(RESULTS_FILE), &results, cli.overwrite)?;
    write_json(&dir.join(REMOVED_FILE), &removed, cli.overwrite)?;
    Ok(partial)
}

fn retrain(cli: &Cli, dir: &Path, which: Baseline) -> anyhow::Result<bool> {
    let cfg = load_config(cli, Some(dir))?;
    let seed = stage_seed(&cfg)?;
    let ds = load_dataset(&cfg, dir)?;
    let init = load_init(dir)?;
    let mask: NoiseMask = read_json(&dir.join(NOISE_FILE))?;
    let mut plans = Vec::new();
    if matches!(which, Baseline::Random | Baseline::All) {
        plans.push((ConfigId::random(), random_removal(&ds, cfg.filter_fraction, seed)));
    }
    if matches!(which, Baseline::Full | Baseline::All) {
        plans.push((ConfigId::full(), full_removal(&ds, &mask, cfg.filter_fraction, seed)));
    }
    let mut results = Vec::new();
    for (id, removed) in plans {
        let o = remove_and_retrain(&ds, &init, removed, id, &cfg.training, seed)?;
        println!("{}: best test accuracy {:.4}", o.result.config, o.result.best_test_accuracy);
        results.push(o.result);
    }
    write_json(&dir.join(BASELINES_FILE), &results, cli.overwrite)?;
    Ok(false)
}

#[derive(serde::Serialize)]
struct Tournament {
    win_matrix: WinMatrix,
    pareto_ranks: BTreeMap<ConfigId, usize>,
}

fn report(cli: &Cli, out: &Path, inputs: &[PathBuf]) -> anyhow::Result<bool> {
    let cfg = load_config(cli, inputs.first().map(PathBuf::as_path).or(Some(out)))?;
    let dirs: Vec<&Path> = if inputs.is_empty() {
        vec![out]
    } else {
        inputs.iter().map(PathBuf::as_path).collect()
    };
    let mut results: Vec<RunResult> = Vec::new();
    for d in &dirs {
        for name in [RESULTS_FILE, BASELINES_FILE] {
            let p = d.join(name);
            if p.is_file() {
                results.extend(read_json::<Vec<RunResult>>(&p)?);
            }
        }
    }
    if results.is_empty() {
        bail!("no results found; run `filter` and `retrain` first");
    }
    let matrix = win_matrix(&results)?;
    let ranks = pareto_ranks(&matrix, cfg.pareto_threshold)?;
    let mut rows: Vec<(usize, f64, &ConfigId, f64)> = matrix
        .configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let accs: Vec<f64> = results.iter().filter(|r| &r.config == c).map(|r| r.best_test_accuracy).collect();
            (ranks[c], matrix.win_rate(i), c, accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(b.2)));
    let mut text = format!("{} runs per configuration\n\n{:<5} {:<24} {:>8} {:>9}\n", matrix.runs, "rank", "config", "win_rate", "accuracy");
    for (rank, win, c, acc) in rows {
        text.push_str(&format!("{rank:<5} {:<24} {win:>8.3} {acc:>9.4}\n", c.as_str()));
    }
    print!("{text}");
    write_json(
        &out.join("tournament.json"),
        &Tournament {
            win_matrix: matrix,
            pareto_ranks: ranks,
        },
        cli.overwrite,
    )?;
    write_file(&out.join("summary.txt"), text.as_bytes(), cli.overwrite)?;
    Ok(false)
}

fn theory_check(epsilons: &[f64], trials: u64) -> anyhow::Result<bool> {
    let example = CounterexampleReport::from_gradients(1.0, -0.5, 5.0, -4.999, 1.0, 1.0)?;
    let (ok, margin) = verify_separation(&example)?;
    println!("{}", serde_json::to_string_pretty(&example)?);
    println!("worked example: separation {} (margin {margin:.6})", if ok { "PASS" } else { "FAIL" });
    let mut all = ok;
    for &eps in epsilons {
        let mut passed = 0;
        let mut worst_ratio = f64::INFINITY;
        for seed in 0..trials {
            let r = build_counterexample(eps, seed)?;
            let (ok, _) = verify_separation(&r)?;
            let ratio = r.cancellation_omega / r.cancellation_theta;
            worst_ratio = worst_ratio.min(ratio);
            passed += usize::from(ok && ratio >= 10.0);
        }
        let line_ok = passed as u64 == trials;
        all &= line_ok;
        println!(
            "epsilon {eps:e}: {passed}/{trials} trials pass, min C(omega)/C(theta) {worst_ratio:.1} {}",
            if line_ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(!all)
}

fn pipeline(cli: &Cli, out: &Path) -> anyhow::Result<bool> {
    let cfg = load_config(cli, None)?;
    let bundle = run_pipeline(&cfg)?;
    emit_reports(&bundle, out, cli.overwrite)?;
    print!("{}", summary_text(&bundle));
    let failures = bundle.failures();
    if failures > 0 {
        eprintln!("{failures} cells or seeds failed");
    }
    Ok(failures > 0)
}
