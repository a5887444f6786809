use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use lac_core::agent::{Agent, AgentConfig, SelectMode};
use lac_core::analysis::{self, BudgetRow, MAX_ADAPTIVE_HORIZON, MAX_ADAPTIVE_POOL};
use lac_core::envmdp::RewardConfig;
use lac_core::gdboost::{self, BagConfig, BlobConfig, BoostConfig, LabeledData};
use lac_core::pool::{self, presets, Pool, PoolPaths, Split, SyntheticPoolConfig};
use lac_core::stacker::{self, StackRow, StackerConfig};
use lac_core::training::{self, TrainConfig, TrainError};

use crate::args::*;
use crate::run::{ensure_parent, invalid, manifest_beside, resolve, RunRecorder};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    ensure_parent(path)?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_pool(dir: &Path, rec: &mut RunRecorder) -> Result<Pool> {
    let pool = pool::load_pool_dir(dir)?;
    rec.pool_inputs(dir)?;
    Ok(pool)
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

pub fn pool(cmd: PoolCommand, seed: Option<u64>) -> Result<()> {
    match cmd {
        PoolCommand::Synth { config, preset, classes, out } => {
            let out = resolve(&out);
            let config_path = config.as_deref().map(resolve);
            let mut rec = RunRecorder::new("pool synth", 0, config_path.as_deref());
            let mut cfg: SyntheticPoolConfig = match (&config_path, preset) {
                (Some(p), _) => {
                    rec.input(p)?;
                    read_json(p)?
                }
                (None, Some(Preset::Router)) => presets::router(0),
                (None, Some(Preset::Perfect)) => presets::perfect(classes, 0),
                (None, Some(Preset::Overlap)) => presets::overlap(0),
                (None, None) => unreachable!("clap requires --config or --preset"),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let p = pool::generate_synthetic(&cfg)?;
            let paths = PoolPaths::in_dir(&out);
            pool::save_pool(&p, &paths)?;
            rec.output(&paths.manifest);
            paths.tables.values().for_each(|t| rec.output(t));
            rec.set_seed(cfg.seed);
            rec.finish(&out.join("run.json"))
        }
        PoolCommand::Import { manifest, tables, out } => {
            let manifest = resolve(&manifest);
            let tables: Vec<PathBuf> = tables.iter().map(|t| resolve(t)).collect();
            let out = resolve(&out);
            let mut rec = RunRecorder::new("pool import", seed.unwrap_or(0), None);
            let p = pool::load_pool(&manifest, &tables)?;
            rec.input(&manifest)?;
            for t in &tables {
                rec.input(t)?;
            }
            let paths = PoolPaths::in_dir(&out);
            pool::save_pool(&p, &paths)?;
            rec.output(&paths.manifest);
            p.splits().for_each(|s| rec.output(&paths.tables[&s]));
            rec.finish(&out.join("run.json"))
        }
        PoolCommand::Validate { pool: dir, table } => {
            if let Some(t) = table {
                let t = resolve(&t);
                let table = pool::read_table(&t)?;
                println!(
                    "ok: {} ({} examples, {} classifiers, {} classes, split {})",
                    t.display(),
                    table.n_examples(),
                    table.n_classifiers(),
                    table.n_classes(),
                    table.split()
                );
            } else if let Some(d) = dir {
                let d = resolve(&d);
                let p = pool::load_pool_dir(&d)?;
                let splits: Vec<String> = p.splits().map(|s| s.to_string()).collect();
                println!(
                    "ok: {} ({} classifiers, {} classes, splits {})",
                    d.display(),
                    p.n_classifiers(),
                    p.n_classes(),
                    splits.join(",")
                );
            }
            Ok(())
        }
        PoolCommand::Subset { pool: dir, ids, out } => {
            let dir = resolve(&dir);
            let out = resolve(&out);
            let mut rec = RunRecorder::new("pool subset", seed.unwrap_or(0), None);
            let p = load_pool(&dir, &mut rec)?;
            let sub = pool::subset_view(&p, &ids)?;
            let paths = PoolPaths::in_dir(&out);
            pool::save_pool(&sub, &paths)?;
            rec.output(&paths.manifest);
            sub.splits().for_each(|s| rec.output(&paths.tables[&s]));
            rec.finish(&out.join("run.json"))
        }
    }
}

fn train_config(args: &TrainArgs, seed: Option<u64>, config_path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match config_path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let l = &args.loss;
    if let Some(h) = l.horizon {
        cfg.horizon = h as usize;
    }
    if let Some(v) = l.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = l.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = l.beta {
        cfg.beta = v;
    }
    if let Some(v) = l.lambda {
        cfg.lambda = v;
    }
    if let Some(e) = args.epochs {
        cfg = cfg.with_epochs(e as usize);
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b as usize;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn train_lac(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let dir = resolve(&args.pool);
    let out = resolve(&args.out);
    let config_path = args.config.as_deref().map(resolve);
    let cfg = train_config(&args, seed, config_path.as_deref())?;
    let mut rec = RunRecorder::new("train-lac", cfg.seed, config_path.as_deref());
    if let Some(p) = &config_path {
        rec.input(p)?;
    }
    let p = load_pool(&dir, &mut rec)?;
    let mut agent_cfg = AgentConfig::new(p.n_classifiers(), p.n_classes());
    agent_cfg.seed = cfg.seed;
    agent_cfg.hard_mask = !args.soft_mask;
    agent_cfg.baseline_depth = args.baseline_depth as usize;
    let agent = Agent::new(agent_cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = match training::train(&p, agent, &cfg) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, batch, detail, last_good }) => {
            let path = out.join("agent.last_good.lacag");
            last_good.save(&path)?;
            return Err(invalid(format!(
                "training diverged at epoch {epoch}, batch {batch}: {detail}; last good agent saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join("agent.lacag");
    let metrics = out.join("metrics.csv");
    outcome.agent.save(&ckpt)?;
    outcome.log.save_csv(&metrics)?;
    write_json(&cfg, &out.join("config.json"))?;
    rec.output(&ckpt);
    rec.output(&metrics);
    rec.output(&out.join("config.json"));
    if let Some(last) = outcome.log.rows.last() {
        println!("epoch {}: test accuracy {:.4}", last.epoch, last.test_accuracy);
    }
    rec.finish(&out.join("run.json"))
}

#[derive(Serialize)]
struct TrajectoryCount {
    path: Vec<usize>,
    count: usize,
}

#[derive(Serialize)]
struct EvalSummary {
    split: Split,
    horizon: usize,
    accuracy: f64,
    mean_reward: f64,
    mean_cost: f64,
    call_freq: Vec<f64>,
    repeated_calls: bool,
    first_step_identical: bool,
    trajectories: Vec<TrajectoryCount>,
}

pub fn eval_lac(args: EvalArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut rec = RunRecorder::new("eval-lac", seed, None);
    let p = load_pool(&resolve(&args.pool), &mut rec)?;
    let ckpt = resolve(&args.ckpt);
    let agent = Agent::load(&ckpt)?;
    rec.input(&ckpt)?;
    let split = split_of(args.split);
    let reward = RewardConfig { lambda: args.lambda, horizon: args.horizon as usize };
    let mode = if args.sample { SelectMode::Sample } else { SelectMode::Argmax };
    let report = training::evaluate(&p, &agent, split, reward, mode, seed)?;
    let summary = EvalSummary {
        split,
        horizon: reward.horizon,
        accuracy: report.accuracy,
        mean_reward: report.mean_reward,
        mean_cost: report.mean_cost,
        call_freq: report.call_freq.clone(),
        repeated_calls: report.has_repeated_calls(),
        first_step_identical: report.first_step_identical,
        trajectories: report.trajectory_counts.iter().map(|(path, &count)| TrajectoryCount { path: path.clone(), count }).collect(),
    };
    match args.out {
        Some(o) => {
            let o = resolve(&o);
            write_json(&summary, &o)?;
            rec.output(&o);
            rec.finish(&manifest_beside(&o))
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

/// Train/validation data for the ensemble commands.
fn ensemble_data(data: &DataFlags, seed: u64, rec: &mut RunRecorder) -> Result<(LabeledData, LabeledData)> {
    if let Some(dir) = &data.pool {
        let p = load_pool(&resolve(dir), rec)?;
        let ids: Vec<usize> = (0..p.n_classifiers()).collect();
        let as_data = |split: Split| -> Result<LabeledData> {
            let t = p.table(split)?;
            let features = (0..t.n_examples()).map(|e| t.features(e, &ids)).collect();
            let labels = (0..t.n_examples()).map(|e| t.label(e)).collect();
            Ok(LabeledData::new(features, labels, p.n_classes())?)
        };
        return Ok((as_data(Split::Train)?, as_data(Split::Val)?));
    }
    let blobs = BlobConfig {
        n_classes: data.blob_classes,
        dim: data.blob_dim,
        per_class: data.blob_per_class,
        label_noise: data.blob_noise,
        seed,
        ..BlobConfig::default()
    };
    Ok((gdboost::gaussian_blobs(&blobs, 0)?, gdboost::gaussian_blobs(&blobs, 1)?))
}

fn write_ensemble(run: &gdboost::EnsembleRun, out: &Path, rec: &mut RunRecorder) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let curve = out.join("curve.csv");
    let committee = out.join("committee.lacgb");
    let mut buf = Vec::new();
    gdboost::write_curve_csv(&run.curve, &mut buf)?;
    write_bytes(&curve, buf)?;
    run.committee.save(&committee)?;
    rec.output(&curve);
    rec.output(&committee);
    if let Some(last) = run.curve.last() {
        println!("round {}: train loss {:.6}, validation accuracy {:.4}", last.round, last.train_loss, last.val_acc);
    }
    Ok(())
}

pub fn boost(args: BoostArgs, seed: Option<u64>) -> Result<()> {
    let config_path = args.config.as_deref().map(resolve);
    let mut cfg: BoostConfig = match &config_path {
        Some(p) => read_json(p)?,
        None => BoostConfig::default(),
    };
    if let Some(r) = args.rounds {
        cfg.rounds = r as usize;
    }
    if let Some(v) = args.shrinkage {
        cfg.shrinkage = v;
    }
    cfg.weight_transfer |= args.weight_transfer;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut rec = RunRecorder::new("boost", cfg.seed, config_path.as_deref());
    if let Some(p) = &config_path {
        rec.input(p)?;
    }
    let (train, val) = ensemble_data(&args.data, cfg.seed, &mut rec)?;
    let run = gdboost::boost(&train, &val, &cfg)?;
    let out = resolve(&args.out);
    write_ensemble(&run, &out, &mut rec)?;
    rec.finish(&out.join("run.json"))
}

pub fn bag(args: BagArgs, seed: Option<u64>) -> Result<()> {
    let config_path = args.config.as_deref().map(resolve);
    let mut cfg: BagConfig = match &config_path {
        Some(p) => read_json(p)?,
        None => BagConfig::default(),
    };
    if let Some(r) = args.rounds {
        cfg.rounds = r as usize;
    }
    cfg.weight_transfer |= args.weight_transfer;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut rec = RunRecorder::new("bag", cfg.seed, config_path.as_deref());
    if let Some(p) = &config_path {
        rec.input(p)?;
    }
    let (train, val) = ensemble_data(&args.data, cfg.seed, &mut rec)?;
    let run = gdboost::bag(&train, &val, &cfg)?;
    let out = resolve(&args.out);
    write_ensemble(&run, &out, &mut rec)?;
    rec.finish(&out.join("run.json"))
}

fn parse_subset(text: &str, n: usize) -> Result<Vec<usize>> {
    if text == "all" {
        return Ok((0..n).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| invalid(format!("bad classifier id {s:?} in --subset"))))
        .collect()
}

pub fn stack(args: StackArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let mut rec = RunRecorder::new("stack", seed, None);
    let p = load_pool(&resolve(&args.pool), &mut rec)?;
    let base = StackerConfig {
        depth: args.depth,
        epochs: args.epochs.map_or(StackerConfig::default().epochs, |e| e as usize),
        seed,
        ..StackerConfig::default()
    };
    let subsets: Vec<Vec<usize>> = match (args.best_k, &args.subset) {
        (Some(k), _) => stacker::k_subsets(p.n_classifiers(), k as usize),
        (None, Some(s)) => vec![parse_subset(s, p.n_classifiers())?],
        (None, None) => vec![(0..p.n_classifiers()).collect()],
    };
    if subsets.is_empty() {
        return Err(invalid(format!("--best-k exceeds the pool size {}", p.n_classifiers())));
    }
    let rows: Vec<StackRow> = match (args.knn, args.best_k) {
        (Some(k), _) => subsets
            .iter()
            .map(|s| {
                Ok(StackRow {
                    subset: s.clone(),
                    k: s.len(),
                    val_acc: stacker::knn_stacker(&p, k as usize, s, Split::Val)?,
                    test_acc: stacker::knn_stacker(&p, k as usize, s, Split::Test)?,
                })
            })
            .collect::<Result<_>>()?,
        (None, Some(k)) => {
            let search = stacker::best_subset(&p, k as usize, &base)?;
            println!(
                "best subset {}: validation {:.4}, test {:.4}",
                stacker::format_subset(&search.best.subset),
                search.best.val_acc,
                search.best.test_acc
            );
            search.rows
        }
        (None, None) => {
            let r = stacker::train_stacker(&p, &StackerConfig { subset: subsets[0].clone(), ..base })?;
            vec![StackRow::from(&r)]
        }
    };
    let out = resolve(&args.out);
    let mut buf = Vec::new();
    stacker::write_results_csv(&rows, &mut buf)?;
    write_bytes(&out, buf)?;
    rec.output(&out);
    rec.finish(&manifest_beside(&out))
}

pub fn report(cmd: ReportCommand, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    match cmd {
        ReportCommand::Trajectories { pool: dir, ckpt, horizon, out } => {
            let mut rec = RunRecorder::new("report trajectories", seed, None);
            let p = load_pool(&resolve(&dir), &mut rec)?;
            let ckpt = resolve(&ckpt);
            let agent = Agent::load(&ckpt)?;
            rec.input(&ckpt)?;
            let reward = RewardConfig { lambda: 0.0, horizon: horizon as usize };
            let report = training::evaluate(&p, &agent, Split::Test, reward, SelectMode::Argmax, seed)?;
            let names: Vec<String> = p.specs().iter().map(|s| s.name.clone()).collect();
            let graph = analysis::trajectory_graph(&report.trajectories, &names)?;
            let out = resolve(&out);
            write_bytes(&out, graph.to_dot().into_bytes())?;
            rec.output(&out);
            rec.finish(&manifest_beside(&out))
        }
        ReportCommand::Frequencies { metrics, out } => {
            let metrics = resolve(&metrics);
            let mut rec = RunRecorder::new("report frequencies", seed, None);
            let file = fs::File::open(&metrics).with_context(|| format!("opening {}", metrics.display()))?;
            rec.input(&metrics)?;
            let curve = analysis::read_frequency_curve(file)?;
            let out = resolve(&out);
            let mut buf = Vec::new();
            curve.write_csv(&mut buf)?;
            write_bytes(&out, buf)?;
            rec.output(&out);
            rec.finish(&manifest_beside(&out))
        }
        ReportCommand::Budget { pool: dir, horizons, epochs, out } => {
            let mut rec = RunRecorder::new("report budget", seed, None);
            let p = load_pool(&resolve(&dir), &mut rec)?;
            let mut rows = Vec::new();
            for &h in &horizons {
                let cfg = TrainConfig { horizon: h, seed, ..TrainConfig::default() }.with_epochs(epochs as usize);
                cfg.validate().map_err(|e| invalid(e.to_string()))?;
                let mut agent_cfg = AgentConfig::new(p.n_classifiers(), p.n_classes());
                agent_cfg.seed = seed;
                let outcome = training::train(&p, Agent::new(agent_cfg)?, &cfg)?;
                let r = training::evaluate(&p, &outcome.agent, Split::Test, cfg.reward(), SelectMode::Argmax, seed)?;
                println!("horizon {h}: test accuracy {:.4}", r.accuracy);
                rows.push(BudgetRow { horizon: h, test_accuracy: r.accuracy, mean_cost: r.mean_cost });
            }
            let out = resolve(&out);
            let mut buf = Vec::new();
            analysis::write_budget_csv(&rows, &mut buf)?;
            write_bytes(&out, buf)?;
            rec.output(&out);
            rec.finish(&manifest_beside(&out))
        }
        ReportCommand::Oracles { pool: dir, max_k, out } => {
            let mut rec = RunRecorder::new("report oracles", seed, None);
            let p = load_pool(&resolve(&dir), &mut rec)?;
            let n = p.n_classifiers();
            let max_k = max_k.map_or(n.min(MAX_ADAPTIVE_HORIZON), |k| k as usize).min(n);
            let mut text = String::from("k,fixed_accuracy,fixed_subset,adaptive_accuracy\n");
            for k in 1..=max_k {
                let fixed = analysis::oracle_fixed(&p, k)?;
                let adaptive = if n <= MAX_ADAPTIVE_POOL && k <= MAX_ADAPTIVE_HORIZON {
                    analysis::oracle_adaptive(&p, k)?.accuracy.to_string()
                } else {
                    String::new()
                };
                text.push_str(&format!("{k},{},{},{adaptive}\n", fixed.accuracy, stacker::format_subset(&fixed.subset)));
            }
            let out = resolve(&out);
            write_bytes(&out, text.into_bytes())?;
            rec.output(&out);
            rec.finish(&manifest_beside(&out))
        }
    }
}
