//! Command-line pipeline. Every command reads its inputs from, and writes its
//! outputs atomically to, the output directory:
//!
//! | command            | reads                              | writes                                   |
//! |--------------------|------------------------------------|------------------------------------------|
//! | `cluster`          | config (or dataset CSV)            | `dataset.csv`, `assignment.csv`, `centroids.csv` |
//! | `train-expert --k` | dataset, assignment, centroids     | `expert_{k}.hddm`, `curve_expert_{k}.csv`|
//! | `train-router`     | dataset, assignment, centroids     | `router.hddm`, `curve_router.csv`        |
//! | `sample`           | `expert_*.hddm`, `router.hddm`     | `samples.csv`, `sample_audit.csv`        |
//! | `evaluate --study` | config (checkpoints with `--checkpoints`) | `study_{name}.csv`               |

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{ConditionPlan, DatasetSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::evaluation::{run_study, write_study_csv, StudyConfig, StudyKind};
use crate::netcore::checkpoint::Checkpoint;
use crate::netcore::{ExpertModel, Objective, RouterModel};
use crate::partition::{generate_mixture, hierarchical_kmeans, shard, ClusterAssignment, SyntheticDataset};
use crate::sampler::{sample_batch, ExpertRef};
use crate::schedules::Schedule;
use crate::training::{convert_checkpoint, train_expert, train_router, write_curve_csv};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "HDDM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hddm", version, about = "Heterogeneous decentralized diffusion at desk scale")]
pub struct Cli {
    /// Experiment configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory of the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or read the dataset and partition it into K shards.
    Cluster,
    /// Train expert `k` on its shard.
    TrainExpert {
        #[arg(long)]
        k: usize,
    },
    /// Train the router on all data.
    TrainRouter,
    /// Move a checkpoint's trunk to another objective and schedule.
    ConvertCheckpoint {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        /// `ddpm` or `fm`.
        #[arg(long)]
        objective: String,
        /// `linear` or `cosine`.
        #[arg(long)]
        schedule: String,
    },
    /// Draw samples from the trained experts and router.
    Sample,
    /// Run a study and write its table.
    Evaluate {
        /// mono-vs-decentralized, strategy-sweep, threshold-sweep, mix-sweep or warm-start.
        #[arg(long)]
        study: String,
        /// Use the checkpoints in the output directory (strategy-sweep only).
        #[arg(long)]
        checkpoints: bool,
    },
    /// List tensors that differ between two checkpoints.
    DiffCheckpoint { a: PathBuf, b: PathBuf },
}

/// Resolved configuration with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.csv")
}

pub fn assignment_path(out: &Path) -> PathBuf {
    out.join("assignment.csv")
}

pub fn centroids_path(out: &Path) -> PathBuf {
    out.join("centroids.csv")
}

pub fn expert_path(out: &Path, k: usize) -> PathBuf {
    out.join(format!("expert_{k}.hddm"))
}

pub fn router_path(out: &Path) -> PathBuf {
    out.join("router.hddm")
}

/// Executes one command, returning the lines to print.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    if let Command::ConvertCheckpoint { src, dst, objective, schedule } = &cli.command {
        return convert(src, dst, objective, schedule, cli.seed.unwrap_or(0));
    }
    if let Command::DiffCheckpoint { a, b } = &cli.command {
        return diff(a, b);
    }
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match &cli.command {
        Command::Cluster => cluster(&cfg),
        Command::TrainExpert { k } => train_one_expert(&cfg, *k),
        Command::TrainRouter => train_the_router(&cfg),
        Command::Sample => sample(&cfg),
        Command::Evaluate { study, checkpoints } => evaluate(&cfg, study, *checkpoints, cli.seed.is_some()),
        Command::ConvertCheckpoint { .. } | Command::DiffCheckpoint { .. } => unreachable!("handled above"),
    }
}

fn cluster(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let data = match &cfg.dataset {
        DatasetSource::Ring { points, .. } => generate_mixture(&cfg.dataset.spec()?.expect("ring spec"), *points, cfg.seed)?,
        DatasetSource::Csv(p) => {
            if !p.exists() {
                return Err(Error::MissingFile { path: p.clone(), hint: "check [dataset] path in the config".into() });
            }
            SyntheticDataset::read_csv(p)?
        }
    };
    let a = hierarchical_kmeans(&data, cfg.m_fine, cfg.k, cfg.metric, cfg.seed)?;
    data.write_csv(&dataset_path(&cfg.out_dir))?;
    a.write_csv(&assignment_path(&cfg.out_dir), &centroids_path(&cfg.out_dir))?;
    Ok(vec![format!("clustered {} points into K = {}; shard sizes {:?}", data.len(), a.k, a.sizes())])
}

fn load_clustered(cfg: &ExperimentConfig) -> Result<(SyntheticDataset, ClusterAssignment)> {
    let need = |p: PathBuf| {
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingFile { path: p, hint: "run `hddm cluster` first".into() })
        }
    };
    let mut data = SyntheticDataset::read_csv(&need(dataset_path(&cfg.out_dir))?)?;
    data.spec = cfg.dataset.spec()?;
    let a = ClusterAssignment::read_csv(&need(assignment_path(&cfg.out_dir))?, &need(centroids_path(&cfg.out_dir))?, cfg.metric)?;
    if a.assignment.len() != data.len() {
        return Err(Error::Shape(format!("assignment has {} rows, dataset {}", a.assignment.len(), data.len())));
    }
    if a.k != cfg.k {
        return Err(Error::Config(format!("assignment has K = {}, config K = {}; rerun `hddm cluster`", a.k, cfg.k)));
    }
    Ok((data, a))
}

fn train_one_expert(cfg: &ExperimentConfig, k: usize) -> Result<Vec<String>> {
    if k >= cfg.k {
        return Err(Error::Config(format!("expert {k} out of range for K = {}", cfg.k)));
    }
    let (data, a) = load_clustered(cfg)?;
    let part = shard(&data, &a, k)?;
    let tc = cfg.mix()?.config_for(k, &cfg.expert_template());
    let outcome = train_expert(&part, &tc, k as u64)?;
    outcome.model.save(&expert_path(&cfg.out_dir, k))?;
    write_curve_csv(&cfg.out_dir.join(format!("curve_expert_{k}.csv")), &outcome.curve)?;
    Ok(vec![format!(
        "expert {k}: {} on {} ({} points), final validation loss {}",
        tc.objective.name(),
        tc.schedule.name(),
        part.len(),
        outcome.final_validation().map_or("n/a".into(), |v| format!("{v:.6}"))
    )])
}

fn train_the_router(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let (data, a) = load_clustered(cfg)?;
    let outcome = train_router(&data, &a, &cfg.mix()?, &cfg.router_config())?;
    outcome.router.save(&router_path(&cfg.out_dir))?;
    write_curve_csv(&cfg.out_dir.join("curve_router.csv"), &outcome.curve)?;
    let last = outcome.curve.last().map_or("n/a".into(), |c| format!("{:.6}", c.loss));
    Ok(vec![format!("router over {} experts, final loss {last}", a.k)])
}

fn sample(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let experts = (0..cfg.k).map(|k| ExpertModel::load(&expert_path(&cfg.out_dir, k))).collect::<Result<Vec<_>>>()?;
    let router = RouterModel::load(&router_path(&cfg.out_dir))?;
    let refs: Vec<ExpertRef<'_>> = experts.iter().map(|e| e as ExpertRef<'_>).collect();
    let labels = experts.iter().map(ExpertModel::cond_count).max().unwrap_or(0);
    let conds: Vec<Option<usize>> = (0..cfg.sampler.batch)
        .map(|i| match cfg.conditions {
            ConditionPlan::Unconditional => None,
            ConditionPlan::Cycle => (labels > 0).then(|| i % labels),
            ConditionPlan::Fixed(c) => Some(c),
        })
        .collect();
    let run = sample_batch(&refs, &router, &cfg.sampler_config(), &conds)?;
    run.write_samples_csv(&cfg.out_dir.join("samples.csv"))?;
    run.write_audit_csv(&cfg.out_dir.join("sample_audit.csv"))?;
    Ok(vec![format!("{} samples with {} over {} steps", run.samples.len(), cfg.sampler.selection.name(), cfg.sampler.steps)])
}

fn evaluate(cfg: &ExperimentConfig, study: &str, checkpoints: bool, seed_given: bool) -> Result<Vec<String>> {
    let kind = StudyKind::parse(study)?;
    let mut sc: StudyConfig = cfg.study.clone();
    if checkpoints {
        if kind != StudyKind::StrategySweep {
            return Err(Error::Config("--checkpoints applies to strategy-sweep only".into()));
        }
        sc.checkpoint_dir = Some(cfg.out_dir.clone());
    }
    if matches!(cfg.dataset, DatasetSource::Csv(_)) {
        return Err(Error::Config("studies run on the generated ring benchmark; remove [dataset] path".into()));
    }
    let seeds = if checkpoints || seed_given { vec![cfg.seed] } else { cfg.study_seeds.clone() };
    let rows = run_study(kind, &sc, &seeds)?;
    let path = cfg.out_dir.join(format!("study_{}.csv", kind.name()));
    write_study_csv(&path, &rows)?;
    let mut out: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "seed {} {:<12} frechet {:.4} diversity {:.4} intra {} value {}",
                r.seed,
                r.config,
                r.report.frechet,
                r.report.diversity_mean_pairwise,
                r.report.intra_condition_diversity.map_or("-".into(), |v| format!("{v:.4}")),
                r.value
            )
        })
        .collect();
    out.push(format!("wrote {}", path.display()));
    Ok(out)
}

fn convert(src: &Path, dst: &Path, objective: &str, schedule: &str, seed: u64) -> Result<Vec<String>> {
    let source = ExpertModel::load(src)?;
    let objective = Objective::parse(objective)?;
    let schedule = Schedule::parse(schedule)?;
    let model = convert_checkpoint(&source, objective, schedule, seed)?;
    model.save(dst)?;
    Ok(vec![format!("converted {} -> {} ({} on {})", src.display(), dst.display(), objective.name(), model.schedule().name())])
}

fn diff(a: &Path, b: &Path) -> Result<Vec<String>> {
    let (ca, cb) = (Checkpoint::load(a)?, Checkpoint::load(b)?);
    let names = ca.diff(&cb)?;
    let mut out = Vec::new();
    if ca.kind != cb.kind || ca.schedule != cb.schedule {
        out.push(format!("header: {:?}/{} vs {:?}/{}", ca.kind, ca.schedule.name(), cb.kind, cb.schedule.name()));
    }
    if names.is_empty() {
        out.push("tensors identical".into());
        return Ok(out);
    }
    // EMA shadows are reset on conversion, so only live tensors decide.
    let trunk = names.iter().filter(|n| !n.starts_with("ema.")).all(|n| n.starts_with("head.") || n.starts_with("cond."));
    out.extend(names.iter().map(|n| format!("differs: {n}")));
    out.push(if trunk { "live trunk identical".into() } else { "live trunk differs".into() });
    Ok(out)
}
