//! Isolated expert training, router training and checkpoint conversion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::netcore::optim::ema_update;
use crate::netcore::{
    Adam, AdamConfig, ArchConfig, BackwardScratch, ExpertModel, ForwardCache, GradientTape, Network, Objective, RouterModel,
};
use crate::objectives::make_noisy_with;
use crate::partition::{ClusterAssignment, SyntheticDataset};
use crate::rng::{self, StreamRng};
use crate::sampler::softmax;
use crate::schedules::Schedule;

pub const HOLDOUT_FRACTION: f64 = 0.1;
const VALIDATION_DRAWS: usize = 4;
const HEAD_REINIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub cfg_drop_prob: f64,
    pub clip_norm: f64,
    pub objective: Objective,
    pub schedule: Schedule,
    pub seed: u64,
    pub hidden: usize,
    pub blocks: usize,
    /// Validation loss is recorded every this many steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-4,
            warmup_steps: 500,
            ema_decay: 0.9999,
            cfg_drop_prob: 0.1,
            clip_norm: 1.0,
            objective: Objective::Velocity,
            schedule: Schedule::Linear,
            seed: 0,
            hidden: 32,
            blocks: 2,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::Config(format!("cfg drop probability must lie in [0, 1], got {}", self.cfg_drop_prob)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::Config("batch size, hidden width and block count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Per-expert objective and schedule assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveMix {
    pub objectives: Vec<Objective>,
    pub schedules: Vec<Schedule>,
}

impl ObjectiveMix {
    /// ε-prediction for `ddpm_ids` under `eps_schedule`, velocity prediction on
    /// the linear path for the rest.
    pub fn new(k: usize, ddpm_ids: &[usize], eps_schedule: Schedule) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("objective mix needs at least one expert".into()));
        }
        if let Some(bad) = ddpm_ids.iter().find(|&&i| i >= k) {
            return Err(Error::Config(format!("DDPM expert id {bad} out of range for K = {k}")));
        }
        let objectives: Vec<Objective> =
            (0..k).map(|i| if ddpm_ids.contains(&i) { Objective::Epsilon } else { Objective::Velocity }).collect();
        let schedules = objectives
            .iter()
            .map(|o| match o {
                Objective::Epsilon => eps_schedule.clone(),
                Objective::Velocity => Schedule::Linear,
            })
            .collect();
        Ok(Self { objectives, schedules })
    }

    /// Experts 0 and 3 on ε-prediction (those below `k`), cosine schedule.
    pub fn default_for(k: usize) -> Result<Self> {
        let ids: Vec<usize> = [0, 3].into_iter().filter(|&i| i < k).collect();
        Self::new(k, &ids, Schedule::Cosine)
    }

    pub fn homogeneous(k: usize) -> Result<Self> {
        Self::new(k, &[], Schedule::Cosine)
    }

    pub fn len(&self) -> usize {
        self.objectives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectives.is_empty()
    }

    pub fn ddpm_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.objectives[i] == Objective::Epsilon).collect()
    }

    /// Distinct corruption schedules used by the experts.
    pub fn corruption_schedules(&self) -> Vec<Schedule> {
        let mut out: Vec<Schedule> = Vec::new();
        for s in &self.schedules {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }

    /// Training configuration of expert `k` derived from a shared template.
    pub fn config_for(&self, k: usize, template: &TrainConfig) -> TrainConfig {
        TrainConfig { objective: self.objectives[k], schedule: self.schedules[k].clone(), ..template.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        curve.iter().map(|c| vec![c.step.to_string(), fmt_f64(c.loss), fmt_f64(c.lr), fmt_f64(c.grad_norm)]).collect();
    write_csv(path, &["step", "loss", "lr", "grad_norm"], &rows)
}

/// `(x_t, t, condition, target)`.
type Example = (Vec<f64>, f64, Option<usize>, Vec<f64>);

/// Fixed noisy examples used to measure held-out loss.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    examples: Vec<Example>,
}

impl ValidationSet {
    /// `VALIDATION_DRAWS` corruptions per point from stream `(seed, "train/validation", index)`.
    pub fn new(points: &SyntheticDataset, objective: Objective, schedule: &Schedule, seed: u64, index: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "train/validation", index);
        let mut examples = Vec::with_capacity(points.len() * VALIDATION_DRAWS);
        for (i, x0) in points.points.iter().enumerate() {
            for _ in 0..VALIDATION_DRAWS {
                let t: f64 = r.random();
                let eps: Vec<f64> = (0..x0.len()).map(|_| r.sample(StandardNormal)).collect();
                let s = make_noisy_with(x0, &eps, t, objective, schedule)?;
                examples.push((s.x_t, t, points.condition(i), s.target));
            }
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Mean per-element squared error of the EMA weights, the ones used for prediction.
    pub fn loss(&self, net: &Network) -> Result<f64> {
        if self.examples.is_empty() {
            return Ok(0.0);
        }
        let mut cache = ForwardCache::new(net.arch());
        let mut total = 0.0;
        for (x, t, c, target) in &self.examples {
            let c = c.filter(|&c| c < net.arch().cond_count);
            net.forward_into(x, *t, c, true, &mut cache)?;
            total += cache.out.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64;
        }
        Ok(total / self.examples.len() as f64)
    }
}

/// Splits `0..n` into (train, holdout) with a seeded shuffle. Shards of fewer
/// than ten points are not split.
pub fn holdout_split(n: usize, seed: u64, index: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 10 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut rng::stream(seed, "train/holdout", index));
    let h = ((n as f64) * HOLDOUT_FRACTION).ceil() as usize;
    let mut hold = idx[..h].to_vec();
    let mut train = idx[h..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ExpertModel,
    pub curve: Vec<CurvePoint>,
    /// `(step, validation loss)` at the configured interval and after the last step.
    pub validation: Vec<(usize, f64)>,
}

impl TrainOutcome {
    /// First recorded step whose validation loss is at or below `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<usize> {
        self.validation.iter().find(|(_, l)| *l <= threshold).map(|(s, _)| *s)
    }

    pub fn final_validation(&self) -> Option<f64> {
        self.validation.last().map(|(_, l)| *l)
    }
}

/// Trains a freshly initialized expert on `shard`. All randomness for expert
/// `index` comes from streams labelled `init/…`, `train/batch`,
/// `train/holdout` and `train/validation` at that index.
pub fn train_expert(shard: &SyntheticDataset, cfg: &TrainConfig, index: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cond_count =
        shard.spec.as_ref().map_or_else(|| shard.conditions.as_ref().and_then(|c| c.iter().max()).map_or(0, |m| m + 1), |s| s.cond_count());
    let arch = ArchConfig::expert(shard.dim, cfg.hidden, cfg.blocks, cond_count);
    let model = ExpertModel::new(cfg.objective, cfg.schedule.clone(), arch, rng::derive_seed(cfg.seed, "init/expert", index))?;
    continue_training(model, shard, cfg, index)
}

/// Trains an existing model (for example a converted checkpoint) on `shard`.
pub fn continue_training(mut model: ExpertModel, shard: &SyntheticDataset, cfg: &TrainConfig, index: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::Config(format!("shard {index} is empty")));
    }
    if shard.dim != model.data_dim() {
        return Err(Error::Shape(format!("shard dimension {} vs model {}", shard.dim, model.data_dim())));
    }
    let objective = model.objective();
    let schedule = model.schedule().clone();
    let (train_idx, hold_idx) = holdout_split(shard.len(), cfg.seed, index);
    let val_points = if hold_idx.is_empty() { shard.clone() } else { shard.subset(&hold_idx) };
    let validation = ValidationSet::new(&val_points, objective, &schedule, cfg.seed, index)?;
    let cond_count = model.cond_count();

    let arch = *model.network().arch();
    let net = model.network_mut();
    let mut adam = Adam::new(net.layout().len(), AdamConfig::default());
    let mut tape = GradientTape::zeros(net.layout().len());
    let mut cache = ForwardCache::new(&arch);
    let mut scratch = BackwardScratch::new(&arch);
    let mut r = rng::stream(cfg.seed, "train/batch", index);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut val_log = Vec::new();
    let mut eps = vec![0.0; shard.dim];

    for step in 0..cfg.steps {
        tape.zero();
        let mut loss = 0.0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let i = train_idx[r.random_range(0..train_idx.len())];
            let t: f64 = r.random();
            eps.iter_mut().for_each(|e| *e = r.sample(StandardNormal));
            let drop = r.random::<f64>() < cfg.cfg_drop_prob;
            let cond = if drop { None } else { shard.condition(i).filter(|&c| c < cond_count) };
            let s = make_noisy_with(&shard.points[i], &eps, t, objective, &schedule)?;
            net.forward_into(&s.x_t, t, cond, false, &mut cache)?;
            let n = s.target.len() as f64;
            let mut dout = vec![0.0; s.target.len()];
            for (j, (p, y)) in cache.out.iter().zip(&s.target).enumerate() {
                loss += (p - y) * (p - y) / n * inv_b;
                dout[j] = 2.0 * (p - y) / n * inv_b;
            }
            net.backward_into(&cache, &dout, &mut tape, &mut scratch);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64 });
        }
        tape.check_finite(net.layout())?;
        let lr = cfg.lr_at(step);
        let grad_norm = adam.step(&mut net.params, &mut tape.grads, lr, Some(cfg.clip_norm));
        ema_update(&mut net.ema, &net.params, cfg.ema_decay);
        net.step_count += 1;
        curve.push(CurvePoint { step, loss, lr, grad_norm });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            val_log.push((step + 1, validation.loss(net)?));
        }
    }
    if val_log.last().map(|(s, _)| *s) != Some(cfg.steps) {
        val_log.push((cfg.steps, validation.loss(model.network())?));
    }
    Ok(TrainOutcome { model, curve, validation: val_log })
}

/// Transfers trunk, time embedding and modulation parameters to a model with
/// a new objective and schedule. The output head is redrawn from
/// `N(0, 0.02²)`, the condition embeddings start fresh, EMA restarts from the
/// live weights and the step counter resets.
pub fn convert_checkpoint(source: &ExpertModel, objective: Objective, schedule: Schedule, reinit_seed: u64) -> Result<ExpertModel> {
    convert_checkpoint_to(source, objective, schedule, *source.network().arch(), reinit_seed)
}

/// As [`convert_checkpoint`] into an explicit target architecture. Only the
/// head and condition embeddings may change shape.
pub fn convert_checkpoint_to(
    source: &ExpertModel,
    objective: Objective,
    schedule: Schedule,
    target: ArchConfig,
    reinit_seed: u64,
) -> Result<ExpertModel> {
    let mut fresh = Network::new(target, rng::derive_seed(reinit_seed, "convert/fresh", 0))?;
    let src = source.network();
    let transferable = |name: &str| !(name.starts_with("head.") || name.starts_with("cond."));
    let mut differing = Vec::new();
    for spec in fresh.layout().tensors() {
        if !transferable(&spec.name) {
            continue;
        }
        match src.layout().get(&spec.name) {
            Some(s) if s.dims == spec.dims => {}
            _ => differing.push(spec.name.clone()),
        }
    }
    for spec in src.layout().tensors() {
        if transferable(&spec.name) && fresh.layout().get(&spec.name).is_none() {
            differing.push(spec.name.clone());
        }
    }
    if !differing.is_empty() {
        return Err(Error::ConversionMismatch(differing));
    }
    let names: Vec<String> = fresh.layout().tensors().iter().map(|s| s.name.clone()).collect();
    let normal = Normal::new(0.0, HEAD_REINIT_STD).expect("valid std");
    for name in names {
        if transferable(&name) {
            let values = src.tensor(&name).expect("checked above").to_vec();
            fresh.tensor_mut(&name).expect("own tensor").copy_from_slice(&values);
        } else if name.starts_with("head.") {
            let mut r = rng::stream(reinit_seed, &format!("convert/{name}"), 0);
            fresh.tensor_mut(&name).expect("own tensor").iter_mut().for_each(|v| *v = normal.sample(&mut r));
        }
    }
    fresh.reset_ema();
    fresh.step_count = 0;
    ExpertModel::from_network(objective, schedule, fresh)
}

/// Per-step cost proxy `batch × steps × parameters`.
pub fn flop_proxy(batch: usize, steps: usize, params: usize) -> f64 {
    batch as f64 * steps as f64 * params as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            clip_norm: 1.0,
            hidden: 32,
            blocks: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RouterOutcome {
    pub router: RouterModel,
    pub curve: Vec<CurvePoint>,
}

fn router_batch(data: &SyntheticDataset, labels: &[usize], schedules: &[Schedule], r: &mut StreamRng) -> Result<(Vec<f64>, f64, usize)> {
    let i = r.random_range(0..data.len());
    let t: f64 = r.random();
    let sched = &schedules[r.random_range(0..schedules.len())];
    let (a, s) = sched.alpha_sigma(t)?;
    let x = data.points[i].iter().map(|x0| a * x0 + s * r.sample::<f64, _>(StandardNormal)).collect();
    Ok((x, t, labels[i]))
}

/// Trains the router with softmax cross-entropy on `(x_t, t) → cluster`.
/// Each example draws `t ~ U(0, 1)` and one of the experts' corruption
/// schedules with equal probability.
pub fn train_router(
    data: &SyntheticDataset,
    assignment: &ClusterAssignment,
    mix: &ObjectiveMix,
    cfg: &RouterConfig,
) -> Result<RouterOutcome> {
    train_router_with(data, assignment, mix, cfg, |_, _| Ok(()))
}

/// As [`train_router`], calling `observe(step, router)` after every step.
pub fn train_router_with<F>(
    data: &SyntheticDataset,
    assignment: &ClusterAssignment,
    mix: &ObjectiveMix,
    cfg: &RouterConfig,
    mut observe: F,
) -> Result<RouterOutcome>
where
    F: FnMut(usize, &RouterModel) -> Result<()>,
{
    if assignment.assignment.len() != data.len() {
        return Err(Error::Shape("assignment does not cover the dataset".into()));
    }
    if mix.len() != assignment.k {
        return Err(Error::Config(format!("objective mix has {} experts, clustering has K = {}", mix.len(), assignment.k)));
    }
    if data.is_empty() {
        return Err(Error::Config("router training needs data".into()));
    }
    let k = assignment.k;
    let mut router = RouterModel::new(data.dim, k, cfg.hidden, cfg.blocks, rng::derive_seed(cfg.seed, "init/router", 0))?;
    if k == 1 {
        return Ok(RouterOutcome { router, curve: Vec::new() });
    }
    let schedules = mix.corruption_schedules();
    let arch = *router.network().arch();
    let net = router.network_mut();
    let mut adam = Adam::new(net.layout().len(), AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let mut tape = GradientTape::zeros(net.layout().len());
    let mut cache = ForwardCache::new(&arch);
    let mut scratch = BackwardScratch::new(&arch);
    let mut r = rng::stream(cfg.seed, "train/router", 0);
    let mut curve = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        tape.zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x, t, label) = router_batch(data, &assignment.assignment, &schedules, &mut r)?;
            net.forward_into(&x, t, None, false, &mut cache)?;
            let p = softmax(&cache.out);
            loss -= p[label].max(1e-300).ln() * inv_b;
            let dout: Vec<f64> = p.iter().enumerate().map(|(j, pj)| (pj - f64::from(u8::from(j == label))) * inv_b).collect();
            net.backward_into(&cache, &dout, &mut tape, &mut scratch);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as u64 });
        }
        tape.check_finite(net.layout())?;
        let lr = if cfg.warmup_steps == 0 { cfg.lr } else { cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0) };
        let grad_norm = adam.step(&mut net.params, &mut tape.grads, lr, Some(cfg.clip_norm));
        net.reset_ema();
        net.step_count += 1;
        curve.push(CurvePoint { step, loss, lr, grad_norm });
        let snapshot = RouterModel::from_network(net.clone());
        observe(step, &snapshot)?;
    }
    Ok(RouterOutcome { router, curve })
}

/// Trains one expert per cluster. Experts are independent tasks and may run
/// in parallel; each uses only its shard and its own random streams.
pub fn train_all_experts(
    data: &SyntheticDataset,
    assignment: &ClusterAssignment,
    mix: &ObjectiveMix,
    template: &TrainConfig,
) -> Result<Vec<TrainOutcome>> {
    use rayon::prelude::*;
    (0..assignment.k)
        .into_par_iter()
        .map(|k| {
            let shard = crate::partition::shard(data, assignment, k)?;
            train_expert(&shard, &mix.config_for(k, template), k as u64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{generate_mixture, Covariance, MixtureSpec};

    fn quick(objective: Objective, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 10,
            ema_decay: 0.99,
            hidden: 16,
            blocks: 2,
            objective,
            schedule: if objective == Objective::Epsilon { Schedule::Cosine } else { Schedule::Linear },
            ..TrainConfig::default()
        }
    }

    fn gaussian(n: usize) -> SyntheticDataset {
        let spec = MixtureSpec::new(vec![1.0], vec![vec![1.0, -1.0]], vec![Covariance::isotropic(2, 0.2)]).unwrap();
        generate_mixture(&spec, n, 1).unwrap()
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig { lr: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(100), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { cfg_drop_prob: 1.5, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn empty_shard_is_rejected() {
        let d = SyntheticDataset::from_points(2, vec![]).unwrap();
        assert!(matches!(train_expert(&d, &quick(Objective::Velocity, 5), 0), Err(Error::Config(_))));
    }

    #[test]
    fn loss_trends_down() {
        let d = gaussian(400);
        for obj in [Objective::Velocity, Objective::Epsilon] {
            let out = train_expert(&d, &quick(obj, 300), 0).unwrap();
            let first: f64 = out.curve[..30].iter().map(|c| c.loss).sum::<f64>() / 30.0;
            let last: f64 = out.curve[270..].iter().map(|c| c.loss).sum::<f64>() / 30.0;
            assert!(last < first, "{obj:?}: {first} -> {last}");
            assert_eq!(out.model.network().step_count(), 300);
            assert_ne!(out.model.network().ema(), out.model.network().params());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = gaussian(100);
        let a = train_expert(&d, &quick(Objective::Velocity, 100), 2).unwrap();
        let b = train_expert(&d, &quick(Objective::Velocity, 100), 2).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(
            a.model.network().params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.model.network().params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn holdout_is_ten_percent() {
        let (train, hold) = holdout_split(95, 3, 0);
        assert_eq!(hold.len(), 10);
        assert_eq!(train.len(), 85);
        let (train, hold) = holdout_split(5, 3, 0);
        assert!(hold.is_empty() && train.len() == 5);
    }

    #[test]
    fn conversion_copies_trunk_and_redraws_head() {
        let d = gaussian(100);
        let src = train_expert(&d, &quick(Objective::Epsilon, 30), 0).unwrap().model;
        let conv = convert_checkpoint(&src, Objective::Epsilon, Schedule::Cosine, 9).unwrap();
        for spec in src.network().layout().tensors() {
            let a = src.network().tensor(&spec.name).unwrap();
            let b = conv.network().tensor(&spec.name).unwrap();
            if spec.name.starts_with("head.") {
                assert_ne!(a, b);
            } else if !spec.name.starts_with("cond.") {
                assert_eq!(a, b, "{}", spec.name);
            }
        }
        assert_eq!(conv.network().step_count(), 0);
        assert_eq!(conv.network().ema(), conv.network().params());
        let out = conv.forward(&[0.3, -0.2], 0.5, None, false).unwrap();
        assert!(out.iter().map(|v| v * v).sum::<f64>().sqrt() < 1.0);
        let fm = convert_checkpoint(&src, Objective::Velocity, Schedule::Linear, 9).unwrap();
        assert_eq!(fm.objective(), Objective::Velocity);
    }

    #[test]
    fn conversion_mismatch_lists_tensors() {
        let src = ExpertModel::new(Objective::Epsilon, Schedule::Cosine, ArchConfig::expert(2, 8, 2, 3), 0).unwrap();
        let wider = ArchConfig::expert(3, 8, 2, 3);
        match convert_checkpoint_to(&src, Objective::Velocity, Schedule::Linear, wider, 0) {
            Err(Error::ConversionMismatch(names)) => assert_eq!(names, vec!["input.w".to_string()]),
            other => panic!("{other:?}"),
        }
        let more_labels = ArchConfig::expert(2, 8, 2, 7);
        assert!(convert_checkpoint_to(&src, Objective::Velocity, Schedule::Linear, more_labels, 0).is_ok());
    }

    #[test]
    fn mix_defaults() {
        let m = ObjectiveMix::default_for(8).unwrap();
        assert_eq!(m.ddpm_ids(), vec![0, 3]);
        assert_eq!(m.corruption_schedules(), vec![Schedule::Cosine, Schedule::Linear]);
        assert!(ObjectiveMix::new(2, &[5], Schedule::Cosine).is_err());
    }

    #[test]
    fn compute_matching_rule() {
        // Eight experts at batch 32 versus one model at batch 256, same steps and size.
        let p = 10_000;
        let experts = 8.0 * flop_proxy(32, 1000, p);
        let mono = flop_proxy(256, 1000, p);
        assert!((experts - mono).abs() / mono < 0.01);
    }
}
