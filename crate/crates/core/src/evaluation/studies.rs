//! Experiment harnesses on the ring-of-groups benchmark: groups of tight
//! sub-modes on a circle, one condition label per sub-mode.
//!
//! Mixture-of-experts rows sample conditionally with guidance, cycling
//! through the condition labels.
//!
//! Every configuration compared within a seed samples from the same initial
//! noise, so differences between rows come from the models and the sampler
//! settings only.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{router_accuracy_curve, sample_moments, MetricReport};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::netcore::{ExpertModel, Objective, RouterModel};
use crate::oracle::MixtureOracle;
use crate::partition::{generate_mixture, hierarchical_kmeans, shard, ClusterAssignment, Metric, MixtureSpec, SyntheticDataset};
use crate::rng;
use crate::sampler::{sample_batch, ExpertRef, Router, SamplerConfig, Selection, ThresholdOrder, UniformRouter};
use crate::schedules::Schedule;
use crate::training::{
    continue_training, convert_checkpoint, flop_proxy, train_all_experts, train_expert, train_router, ObjectiveMix, RouterConfig,
    TrainConfig,
};

pub const STUDY_CSV_HEADER: [&str; 9] =
    ["study", "seed", "config", "frechet", "diversity_mean_pairwise", "intra_condition_diversity", "sample_count", "value", "flags"];

const ROUTER_PROBE_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
const ROUTER_PROBES_PER_TIME: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// One model on all data against K experts at the same training FLOPs.
    MonoVsDecentralized,
    /// Top-1, Top-2 and Full selection over one set of experts.
    StrategySweep,
    /// An ε/velocity pair on one shard switched at native time τ.
    ThresholdSweep,
    /// 8FM against mixes with one and two ε-experts.
    MixSweep,
    /// Fine-tuning a converted ε-checkpoint against training from scratch.
    WarmStart,
}

impl StudyKind {
    pub const ALL: [StudyKind; 5] =
        [StudyKind::MonoVsDecentralized, StudyKind::StrategySweep, StudyKind::ThresholdSweep, StudyKind::MixSweep, StudyKind::WarmStart];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.trim()).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown study `{s}`; expected one of {}", names.join(", ")))
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::MonoVsDecentralized => "mono-vs-decentralized",
            StudyKind::StrategySweep => "strategy-sweep",
            StudyKind::ThresholdSweep => "threshold-sweep",
            StudyKind::MixSweep => "mix-sweep",
            StudyKind::WarmStart => "warm-start",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub groups: usize,
    pub sub_modes: usize,
    pub radius: f64,
    pub sub_radius: f64,
    pub variance: f64,
    pub points: usize,
    pub k: usize,
    pub m_fine: usize,
    pub metric: Metric,
    /// Expert template; objective and schedule are set per study.
    pub train: TrainConfig,
    pub router: RouterConfig,
    /// Steps, guidance scale and selection for the mix sweep; the other
    /// studies override the selection per row.
    pub sampler: SamplerConfig,
    /// Unconditional samples per configuration.
    pub samples: usize,
    pub samples_per_condition: usize,
    pub thresholds: Vec<f64>,
    /// Monolithic batch as a multiple of the expert batch.
    pub mono_batch_factor: usize,
    /// Shard used by the threshold pair and the warm-start runs.
    pub pair_shard: usize,
    /// Corruption schedule of the ε-expert in the threshold pair.
    pub pair_eps_schedule: Schedule,
    /// Training steps of the ε source model in the warm-start study.
    pub source_steps: usize,
    /// Fine-tuning budget of both warm-start runs.
    pub finetune_steps: usize,
    /// Load `expert_{k}.hddm` and `router.hddm` from here for the strategy
    /// sweep instead of training.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            groups: 8,
            sub_modes: 3,
            radius: 5.0,
            sub_radius: 0.8,
            variance: 0.05,
            points: 8000,
            k: 8,
            m_fine: 64,
            metric: Metric::Euclidean,
            train: TrainConfig {
                steps: 2000,
                batch_size: 32,
                lr: 2e-3,
                warmup_steps: 100,
                ema_decay: 0.995,
                hidden: 32,
                blocks: 2,
                eval_every: 50,
                ..TrainConfig::default()
            },
            router: RouterConfig {
                steps: 1500,
                batch_size: 64,
                lr: 3e-3,
                warmup_steps: 100,
                hidden: 32,
                blocks: 2,
                ..RouterConfig::default()
            },
            sampler: SamplerConfig { steps: 50, cfg_scale: 7.5, selection: Selection::TopK(2), ..SamplerConfig::default() },
            samples: 512,
            samples_per_condition: 10,
            thresholds: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            mono_batch_factor: 8,
            pair_shard: 0,
            pair_eps_schedule: Schedule::Linear,
            source_steps: 2000,
            finetune_steps: 1000,
            checkpoint_dir: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.sub_modes == 0 || self.points == 0 {
            return Err(Error::Config("benchmark needs groups, sub-modes and points".into()));
        }
        if self.pair_shard >= self.k {
            return Err(Error::Config(format!("pair shard {} out of range for K = {}", self.pair_shard, self.k)));
        }
        if self.samples < 3 || self.samples_per_condition < 2 {
            return Err(Error::Config("studies need at least 3 samples and 2 samples per condition".into()));
        }
        if self.mono_batch_factor == 0 {
            return Err(Error::Config("monolithic batch factor must be positive".into()));
        }
        self.train.validate()
    }

    fn spec(&self) -> Result<MixtureSpec> {
        MixtureSpec::ring_of_groups(self.groups, self.sub_modes, self.radius, self.sub_radius, self.variance)
    }

    fn train_for(&self, seed: u64, objective: Objective, schedule: Schedule) -> TrainConfig {
        TrainConfig { seed, objective, schedule, ..self.train.clone() }
    }

    fn sampler_for(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { seed: rng::derive_seed(seed, "study/sample", 0), ..self.sampler.clone() }
    }

    fn labels(&self) -> usize {
        self.sub_modes
    }

    /// `samples_per_condition` draws for every label in `labels`.
    fn conditional(&self, labels: &[usize]) -> (Vec<Option<usize>>, Vec<usize>) {
        let ids: Vec<usize> = labels.iter().flat_map(|&c| std::iter::repeat_n(c, self.samples_per_condition)).collect();
        (ids.iter().map(|&c| Some(c)).collect(), ids)
    }

    /// `samples` draws cycling through the labels.
    fn cycled(&self) -> (Vec<Option<usize>>, Vec<usize>) {
        let ids: Vec<usize> = (0..self.samples).map(|i| i % self.labels()).collect();
        (ids.iter().map(|&c| Some(c)).collect(), ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub study: StudyKind,
    pub seed: u64,
    pub config: String,
    pub report: MetricReport,
    /// Study-specific: training FLOP proxy, τ, ε-expert count or steps to
    /// reach the scratch run's final validation loss.
    pub value: f64,
}

impl StudyRow {
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.report.frechet_regularized {
            f.push("regularized-covariance".to_string());
        }
        if !self.report.router_accuracy_curve.is_empty() {
            let acc: Vec<String> = self.report.router_accuracy_curve.iter().map(|(t, a)| format!("acc@{t}={a:.3}")).collect();
            f.push(acc.join(";"));
        }
        f.join(";")
    }

    fn csv(&self) -> Vec<String> {
        vec![
            self.study.name().to_string(),
            self.seed.to_string(),
            self.config.clone(),
            fmt_f64(self.report.frechet),
            fmt_f64(self.report.diversity_mean_pairwise),
            self.report.intra_condition_diversity.map(fmt_f64).unwrap_or_default(),
            self.report.sample_count.to_string(),
            fmt_f64(self.value),
            self.flags(),
        ]
    }
}

pub fn write_study_csv(path: &Path, rows: &[StudyRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows.iter().map(StudyRow::csv).collect();
    write_csv(path, &STUDY_CSV_HEADER, &body)
}

/// Runs `kind` once per seed. The same configuration and seeds always give
/// the same rows.
pub fn run_study(kind: StudyKind, cfg: &StudyConfig, seeds: &[u64]) -> Result<Vec<StudyRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let bench = Bench::new(cfg, seed)?;
        let new = match kind {
            StudyKind::MonoVsDecentralized => mono_vs_decentralized(cfg, &bench, seed)?,
            StudyKind::StrategySweep => strategy_sweep(cfg, &bench, seed)?,
            StudyKind::ThresholdSweep => threshold_sweep(cfg, &bench, seed)?,
            StudyKind::MixSweep => mix_sweep(cfg, &bench, seed)?,
            StudyKind::WarmStart => warm_start(cfg, &bench, seed)?,
        };
        rows.extend(new.into_iter().map(|(config, report, value)| StudyRow { study: kind, seed, config, report, value }));
    }
    Ok(rows)
}

type Moments = (Vec<f64>, DMatrix<f64>);

struct Bench {
    data: SyntheticDataset,
    assignment: ClusterAssignment,
    target: Moments,
}

impl Bench {
    fn new(cfg: &StudyConfig, seed: u64) -> Result<Self> {
        let spec = cfg.spec()?;
        let data = generate_mixture(&spec, cfg.points, seed)?;
        let assignment = hierarchical_kmeans(&data, cfg.m_fine, cfg.k, cfg.metric, seed)?;
        let target = MixtureOracle::new(&spec, Schedule::Linear)?.data_moments();
        Ok(Self { data, assignment, target })
    }

    fn shard(&self, k: usize) -> Result<SyntheticDataset> {
        shard(&self.data, &self.assignment, k)
    }
}

fn sample(
    models: &[&ExpertModel],
    router: &(dyn Router + Sync),
    sampler: &SamplerConfig,
    conds: &[Option<usize>],
    groups: Option<&[usize]>,
    target: &Moments,
) -> Result<MetricReport> {
    let experts: Vec<ExpertRef<'_>> = models.iter().map(|m| *m as ExpertRef<'_>).collect();
    let run = sample_batch(&experts, router, &SamplerConfig { batch: conds.len(), ..sampler.clone() }, conds)?;
    MetricReport::score(&run.samples, groups, target)
}

fn router_curve(cfg: &StudyConfig, bench: &Bench, router: &RouterModel, seed: u64) -> Result<Vec<(f64, f64)>> {
    let _ = cfg;
    router_accuracy_curve(router, &bench.data, &bench.assignment, &Schedule::Linear, &ROUTER_PROBE_TIMES, ROUTER_PROBES_PER_TIME, seed)
}

fn decentralized(cfg: &StudyConfig, bench: &Bench, seed: u64) -> Result<(Vec<ExpertModel>, RouterModel)> {
    if let Some(dir) = &cfg.checkpoint_dir {
        return load_checkpoints(dir, cfg.k);
    }
    let mix = ObjectiveMix::homogeneous(cfg.k)?;
    let template = cfg.train_for(seed, Objective::Velocity, Schedule::Linear);
    let experts = train_all_experts(&bench.data, &bench.assignment, &mix, &template)?.into_iter().map(|o| o.model).collect();
    let router = train_router(&bench.data, &bench.assignment, &mix, &RouterConfig { seed, ..cfg.router.clone() })?.router;
    Ok((experts, router))
}

fn load_checkpoints(dir: &Path, k: usize) -> Result<(Vec<ExpertModel>, RouterModel)> {
    let need = |name: String, hint: String| {
        let path = dir.join(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingFile { path, hint })
        }
    };
    let experts = (0..k)
        .map(|i| ExpertModel::load(&need(format!("expert_{i}.hddm"), format!("run `hddm train-expert --k {i}` first"))?))
        .collect::<Result<Vec<_>>>()?;
    let router = RouterModel::load(&need("router.hddm".into(), "run `hddm train-router` first".into())?)?;
    if router.num_experts() != k {
        return Err(Error::Shape(format!("router scores {} experts, expected {k}", router.num_experts())));
    }
    Ok((experts, router))
}

fn strategy_rows(
    cfg: &StudyConfig,
    bench: &Bench,
    seed: u64,
    experts: &[ExpertModel],
    router: &RouterModel,
) -> Result<Vec<(String, MetricReport, f64)>> {
    let refs: Vec<&ExpertModel> = experts.iter().collect();
    let curve = router_curve(cfg, bench, router, seed)?;
    let (conds, ids) = cfg.cycled();
    let mut rows = Vec::new();
    for (name, selection) in [("top1", Selection::Top1), ("top2", Selection::TopK(2)), ("full", Selection::Full)] {
        let sampler = SamplerConfig { selection, ..cfg.sampler_for(seed) };
        let mut report = sample(&refs, router, &sampler, &conds, Some(&ids), &bench.target)?;
        report.router_accuracy_curve = curve.clone();
        let experts_per_step = match selection {
            Selection::Top1 => 1.0,
            Selection::TopK(n) => n.min(experts.len()) as f64,
            _ => experts.len() as f64,
        };
        rows.push((name.to_string(), report, experts_per_step));
    }
    Ok(rows)
}

fn strategy_sweep(cfg: &StudyConfig, bench: &Bench, seed: u64) -> Result<Vec<(String, MetricReport, f64)>> {
    let (experts, router) = decentralized(cfg, bench, seed)?;
    strategy_rows(cfg, bench, seed, &experts, &router)
}

fn mono_vs_decentralized(cfg: &StudyConfig, bench: &Bench, seed: u64) -> Result<Vec<(String, MetricReport, f64)>> {
    let (experts, router) = decentralized(cfg, bench, seed)?;
    let params = experts[0].network().layout().len();
    let expert_flops = flop_proxy(cfg.train.batch_size, cfg.train.steps, params) * experts.len() as f64;
    let mono_cfg = TrainConfig {
        batch_size: cfg.train.batch_size * cfg.mono_batch_factor,
        ..cfg.train_for(seed, Objective::Velocity, Schedule::Linear)
    };
    let mono = train_expert(&bench.data, &mono_cfg, cfg.k as u64)?.model;
    let (conds, ids) = cfg.cycled();
    let sampler = SamplerConfig { selection: Selection::Full, ..cfg.sampler_for(seed) };
    let report = sample(&[&mono], &UniformRouter(1), &sampler, &conds, Some(&ids), &bench.target)?;
    let mono_flops = flop_proxy(mono_cfg.batch_size, mono_cfg.steps, mono.network().layout().len());
    let mut rows = vec![("monolithic".to_string(), report, mono_flops)];
    for (name, report, _) in strategy_rows(cfg, bench, seed, &experts, &router)? {
        rows.push((name, report, expert_flops));
    }
    Ok(rows)
}

fn threshold_sweep(cfg: &StudyConfig, bench: &Bench, seed: u64) -> Result<Vec<(String, MetricReport, f64)>> {
    let data = bench.shard(cfg.pair_shard)?;
    let eps = train_expert(&data, &cfg.train_for(seed, Objective::Epsilon, cfg.pair_eps_schedule.clone()), 0)?.model;
    let fm = train_expert(&data, &cfg.train_for(seed, Objective::Velocity, Schedule::Linear), 1)?.model;
    let target = sample_moments(&data.points)?;
    let mut labels: Vec<usize> = data.conditions.clone().unwrap_or_default();
    labels.sort_unstable();
    labels.dedup();
    let (conds, ids) = cfg.conditional(&labels);
    let base = SamplerConfig { seed: cfg.sampler_for(seed).seed, ..SamplerConfig::conversion_study() };
    cfg.thresholds
        .iter()
        .map(|&tau| {
            let sampler =
                SamplerConfig { selection: Selection::Threshold { tau, order: ThresholdOrder::VelocityHighNoise }, ..base.clone() };
            let report = sample(&[&eps, &fm], &UniformRouter(2), &sampler, &conds, Some(&ids), &target)?;
            Ok((format!("tau={tau}"), report, tau))
        })
        .collect()
}

fn mix_sweep(cfg: &StudyConfig, bench: &Bench, seed: u64) -> Result<Vec<(String, MetricReport, f64)>> {
    let k = cfg.k;
    let fm_template = cfg.train_for(seed, Objective::Velocity, Schedule::Linear);
    let fm: Vec<ExpertModel> = train_all_experts(&bench.data, &bench.assignment, &ObjectiveMix::homogeneous(k)?, &fm_template)?
        .into_iter()
        .map(|o| o.model)
        .collect();
    let eps_template = cfg.train_for(seed, Objective::Epsilon, Schedule::Cosine);
    let mut eps: Vec<Option<ExpertModel>> = vec![None; k];
    for id in [0, 3].into_iter().filter(|&i| i < k) {
        eps[id] = Some(train_expert(&bench.shard(id)?, &eps_template, id as u64)?.model);
    }
    let mixes: Vec<(String, Vec<usize>)> = [(0, vec![]), (1, vec![0]), (2, vec![0, 3])]
        .into_iter()
        .filter(|(_, ids)| ids.iter().all(|&i| i < k))
        .map(|(n, ids)| (if n == 0 { format!("{k}fm") } else { format!("{n}ddpm:{}fm", k - n) }, ids))
        .collect();
    let (conds, ids) = cfg.conditional(&(0..cfg.labels()).collect::<Vec<_>>());
    let sampler = cfg.sampler_for(seed);
    let router_cfg = RouterConfig { seed, ..cfg.router.clone() };
    let mut routers: Vec<(Vec<Schedule>, RouterModel)> = Vec::new();
    let mut rows = Vec::new();
    for (name, ddpm_ids) in mixes {
        let mix = ObjectiveMix::new(k, &ddpm_ids, Schedule::Cosine)?;
        let schedules = mix.corruption_schedules();
        let router = match routers.iter().find(|(s, _)| *s == schedules) {
            Some((_, r)) => r.clone(),
            None => {
                let r = train_router(&bench.data, &bench.assignment, &mix, &router_cfg)?.router;
                routers.push((schedules, r.clone()));
                r
            }
        };
        let models: Vec<&ExpertModel> =
            (0..k).map(|i| if ddpm_ids.contains(&i) { eps[i].as_ref().expect("trained above") } else { &fm[i] }).collect();
        let mut report = sample(&models, &router, &sampler, &conds, Some(&ids), &bench.target)?;
        report.router_accuracy_curve = router_curve(cfg, bench, &router, seed)?;
        rows.push((name, report, ddpm_ids.len() as f64));
    }
    Ok(rows)
}

fn warm_start(cfg: &StudyConfig, bench: &Bench, seed: u64) -> Result<Vec<(String, MetricReport, f64)>> {
    let index = cfg.pair_shard as u64;
    let data = bench.shard(cfg.pair_shard)?;
    let fm_cfg = TrainConfig { steps: cfg.finetune_steps, ..cfg.train_for(seed, Objective::Velocity, Schedule::Linear) };
    let source_cfg = TrainConfig { steps: cfg.source_steps, ..cfg.train_for(seed, Objective::Epsilon, Schedule::Cosine) };
    let source = train_expert(&bench.data, &source_cfg, cfg.k as u64)?.model;
    let converted = convert_checkpoint(&source, Objective::Velocity, Schedule::Linear, rng::derive_seed(seed, "study/convert", 0))?;
    let scratch = train_expert(&data, &fm_cfg, index)?;
    let warm = continue_training(converted, &data, &fm_cfg, index)?;
    let threshold = scratch.final_validation().ok_or_else(|| Error::Numeric("scratch run logged no validation loss".into()))?;
    let target = sample_moments(&data.points)?;
    let conds = vec![None; cfg.samples];
    let sampler = SamplerConfig { selection: Selection::Full, ..cfg.sampler_for(seed) };
    let mut rows = Vec::new();
    for (name, outcome) in [("scratch", &scratch), ("converted", &warm)] {
        let report = sample(&[&outcome.model], &UniformRouter(1), &sampler, &conds, None, &target)?;
        let steps = outcome.steps_to_reach(threshold).map_or(f64::INFINITY, |s| s as f64);
        rows.push((name.to_string(), report, steps));
    }
    Ok(rows)
}
