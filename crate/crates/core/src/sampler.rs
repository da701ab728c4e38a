//! Router-weighted fusion of heterogeneous experts and Euler ODE sampling
//! from `t = 1` (noise) to `t = 0` (data).

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::conversion::{eps_to_velocity_audited, ConversionConfig};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::netcore::{ExpertModel, Objective, RouterModel};
use crate::rng;
use crate::schedules::Schedule;

/// Anything that predicts ε or velocity for a noisy input.
pub trait Denoiser {
    fn objective(&self) -> Objective;
    fn schedule(&self) -> &Schedule;
    fn data_dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>>;
}

/// Anything that scores experts for a noisy input.
pub trait Router {
    fn num_experts(&self) -> usize;
    fn logits(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl Denoiser for ExpertModel {
    fn objective(&self) -> Objective {
        ExpertModel::objective(self)
    }

    fn schedule(&self) -> &Schedule {
        ExpertModel::schedule(self)
    }

    fn data_dim(&self) -> usize {
        ExpertModel::data_dim(self)
    }

    fn predict(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        let cond = cond.filter(|&c| c < self.cond_count());
        ExpertModel::predict(self, x, t, cond)
    }
}

impl Router for RouterModel {
    fn num_experts(&self) -> usize {
        RouterModel::num_experts(self)
    }

    fn logits(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        RouterModel::logits(self, x, t)
    }
}

/// Equal weight on every expert.
#[derive(Debug, Clone, Copy)]
pub struct UniformRouter(pub usize);

impl Router for UniformRouter {
    fn num_experts(&self) -> usize {
        self.0
    }

    fn logits(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

pub type ExpertRef<'a> = &'a (dyn Denoiser + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdOrder {
    /// Velocity experts above τ, ε-experts at or below.
    VelocityHighNoise,
    /// ε-experts above τ, velocity experts at or below.
    EpsilonHighNoise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Top1,
    TopK(usize),
    Full,
    Threshold { tau: f64, order: ThresholdOrder },
}

impl Selection {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown selection `{s}`"));
        match s.as_str() {
            "top1" => Ok(Selection::Top1),
            "full" => Ok(Selection::Full),
            _ => {
                if let Some(k) = s.strip_prefix("top") {
                    return k.parse().map(Selection::TopK).map_err(|_| bad());
                }
                let (order, rest) = if let Some(r) = s.strip_prefix("threshold-reversed:") {
                    (ThresholdOrder::EpsilonHighNoise, r)
                } else if let Some(r) = s.strip_prefix("threshold:") {
                    (ThresholdOrder::VelocityHighNoise, r)
                } else {
                    return Err(bad());
                };
                rest.parse().map(|tau| Selection::Threshold { tau, order }).map_err(|_| bad())
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Selection::Top1 => "top1".into(),
            Selection::TopK(k) => format!("top{k}"),
            Selection::Full => "full".into(),
            Selection::Threshold { tau, order: ThresholdOrder::VelocityHighNoise } => format!("threshold:{tau}"),
            Selection::Threshold { tau, order: ThresholdOrder::EpsilonHighNoise } => format!("threshold-reversed:{tau}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub selection: Selection,
    pub seed: u64,
    /// Number of trajectories.
    pub batch: usize,
    /// Conversion settings for every ε-expert; `None` picks
    /// [`ConversionConfig::for_schedule`] of each expert's own schedule.
    pub conversion: Option<ConversionConfig>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 7.5, selection: Selection::Full, seed: 0, batch: 16, conversion: None }
    }
}

impl SamplerConfig {
    /// Settings of the conversion experiments: 75 steps, guidance 6.
    pub fn conversion_study() -> Self {
        Self { steps: 75, cfg_scale: 6.0, ..Self::default() }
    }

    pub fn validate(&self, experts: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config("cfg scale must be >= 0".into()));
        }
        match self.selection {
            Selection::TopK(k) if k == 0 || k > experts => Err(Error::Config(format!("top-k needs 1 <= k <= {experts}, got {k}"))),
            Selection::Threshold { tau, .. } if !(0.0..=1.0).contains(&tau) => {
                Err(Error::Config(format!("threshold must lie in [0, 1], got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

/// `v_uncond + scale · (v_cond − v_uncond)`.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], scale: f64) -> Vec<f64> {
    v_cond.iter().zip(v_uncond).map(|(c, u)| u + scale * (c - u)).collect()
}

/// Softmax with the maximum subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Router weights after masking by `selection`, renormalized to sum to one.
pub fn select_weights(probs: &[f64], objectives: &[Objective], selection: Selection, t: f64) -> Result<Vec<f64>> {
    let k = probs.len();
    let mut keep = vec![false; k];
    match selection {
        Selection::Full => keep.iter_mut().for_each(|v| *v = true),
        Selection::Top1 | Selection::TopK(_) => {
            let n = match selection {
                Selection::TopK(n) => n.min(k),
                _ => 1,
            };
            let mut order: Vec<usize> = (0..k).collect();
            // Highest probability first; ties go to the lower index.
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            for &i in &order[..n] {
                keep[i] = true;
            }
        }
        Selection::Threshold { tau, order } => {
            let high = t > tau;
            let want = match (order, high) {
                (ThresholdOrder::VelocityHighNoise, true) | (ThresholdOrder::EpsilonHighNoise, false) => Objective::Velocity,
                _ => Objective::Epsilon,
            };
            for (i, o) in objectives.iter().enumerate() {
                keep[i] = *o == want;
            }
            if !keep.iter().any(|v| *v) {
                return Err(Error::Selection(format!("threshold routing found no {} expert at t = {t}", want.name())));
            }
            // Within the chosen family, fall back to equal weights if the router gives it no mass.
            let mass: f64 = (0..k).filter(|&i| keep[i]).map(|i| probs[i]).sum();
            if !(mass > 0.0) {
                let n = keep.iter().filter(|v| **v).count() as f64;
                return Ok(keep.iter().map(|&kp| if kp { 1.0 / n } else { 0.0 }).collect());
            }
        }
    }
    let mass: f64 = (0..k).filter(|&i| keep[i]).map(|i| probs[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::Selection(format!("all router weights are zero after {} selection", selection.name())));
    }
    Ok((0..k).map(|i| if keep[i] { probs[i] / mass } else { 0.0 }).collect())
}

/// One fused velocity evaluation and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedStep {
    pub velocity: Vec<f64>,
    pub weights: Vec<f64>,
    pub used: Vec<usize>,
    pub clamp_hits: usize,
    pub converted_coords: usize,
}

fn unified_velocity(
    expert: ExpertRef<'_>,
    x: &[f64],
    t: f64,
    cond: Option<usize>,
    conversion: Option<&ConversionConfig>,
    step: &mut FusedStep,
) -> Result<Vec<f64>> {
    let pred = expert.predict(x, t, cond)?;
    match expert.objective() {
        Objective::Velocity => Ok(pred),
        Objective::Epsilon => {
            let cfg = conversion.copied().unwrap_or_else(|| ConversionConfig::for_schedule(expert.schedule()));
            let (v, audit) = eps_to_velocity_audited(x, &pred, t, expert.schedule(), &cfg)?;
            step.clamp_hits += audit.clamp_hits;
            step.converted_coords += audit.coords;
            Ok(v)
        }
    }
}

/// Router-weighted convex combination of unified expert velocities, with
/// classifier-free guidance applied to the fused result. The unconditional
/// pass reuses the same router weights.
pub fn fused_velocity(
    x: &[f64],
    t: f64,
    experts: &[ExpertRef<'_>],
    router: &(dyn Router + Sync),
    cond: Option<usize>,
    cfg: &SamplerConfig,
) -> Result<FusedStep> {
    if experts.is_empty() {
        return Err(Error::Config("at least one expert is required".into()));
    }
    if router.num_experts() != experts.len() {
        return Err(Error::Shape(format!("router scores {} experts, {} given", router.num_experts(), experts.len())));
    }
    let dim = x.len();
    if experts.iter().any(|e| e.data_dim() != dim) {
        return Err(Error::Shape("every expert must share the data dimension".into()));
    }
    let probs = softmax(&router.logits(x, t)?);
    let objectives: Vec<Objective> = experts.iter().map(|e| e.objective()).collect();
    let weights = select_weights(&probs, &objectives, cfg.selection, t)?;
    let used: Vec<usize> = (0..experts.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut step = FusedStep { velocity: vec![0.0; dim], weights, used, clamp_hits: 0, converted_coords: 0 };
    let guided = cond.is_some() && cfg.cfg_scale != 1.0;
    let mut uncond = vec![0.0; dim];
    for &i in &step.used.clone() {
        let w = step.weights[i];
        let v = unified_velocity(experts[i], x, t, cond, cfg.conversion.as_ref(), &mut step)?;
        for (a, b) in step.velocity.iter_mut().zip(&v) {
            *a += w * b;
        }
        if guided {
            let v = unified_velocity(experts[i], x, t, None, cfg.conversion.as_ref(), &mut step)?;
            for (a, b) in uncond.iter_mut().zip(&v) {
                *a += w * b;
            }
        }
    }
    if guided {
        step.velocity = cfg_combine(&step.velocity, &uncond, cfg.cfg_scale);
    }
    Ok(step)
}

/// A single sampled path with per-step routing records.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub used: Vec<Vec<usize>>,
    pub velocity_norms: Vec<f64>,
    pub clamp_rates: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }
}

/// Initial noise of trajectory `index`.
pub fn initial_noise(seed: u64, index: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "sample/x1", index as u64);
    (0..dim).map(|_| r.sample(StandardNormal)).collect()
}

/// Time grid `1, 1 − 1/n, …, 0`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// Integrates one trajectory with `x_{t−Δ} = x_t − Δ u_t(x_t)`.
pub fn sample_trajectory(
    experts: &[ExpertRef<'_>],
    router: &(dyn Router + Sync),
    cfg: &SamplerConfig,
    cond: Option<usize>,
    index: usize,
) -> Result<Trajectory> {
    cfg.validate(experts.len())?;
    let dim = experts.first().ok_or_else(|| Error::Config("at least one expert is required".into()))?.data_dim();
    let times = time_grid(cfg.steps);
    let mut x = initial_noise(cfg.seed, index, dim);
    let mut traj = Trajectory {
        states: vec![x.clone()],
        times: times.clone(),
        weights: Vec::with_capacity(cfg.steps),
        used: Vec::with_capacity(cfg.steps),
        velocity_norms: Vec::with_capacity(cfg.steps),
        clamp_rates: Vec::with_capacity(cfg.steps),
    };
    for i in 0..cfg.steps {
        let (t, t_next) = (times[i], times[i + 1]);
        let step = fused_velocity(&x, t, experts, router, cond, cfg)?;
        let dt = t - t_next;
        for (xi, v) in x.iter_mut().zip(&step.velocity) {
            *xi -= dt * v;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: i,
                t,
                msg: format!("trajectory {index}: experts {:?}, weights {:?}, velocity {:?}", step.used, step.weights, step.velocity),
            });
        }
        traj.velocity_norms.push(step.velocity.iter().map(|v| v * v).sum::<f64>().sqrt());
        traj.clamp_rates.push(if step.converted_coords == 0 { 0.0 } else { step.clamp_hits as f64 / step.converted_coords as f64 });
        traj.weights.push(step.weights);
        traj.used.push(step.used);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

/// Per-step summary over a batch of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAudit {
    pub step: usize,
    pub t: f64,
    /// How many trajectories used each expert.
    pub usage: Vec<usize>,
    pub mean_weights: Vec<f64>,
    pub mean_velocity_norm: f64,
    pub clamp_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub samples: Vec<Vec<f64>>,
    pub conditions: Vec<Option<usize>>,
    pub audit: Vec<StepAudit>,
}

/// Samples one trajectory per entry of `conds`; trajectory `i` draws its
/// noise from stream `(seed, "sample/x1", i)`, so results do not depend on
/// how the batch is scheduled across threads.
pub fn sample_batch(
    experts: &[ExpertRef<'_>],
    router: &(dyn Router + Sync),
    cfg: &SamplerConfig,
    conds: &[Option<usize>],
) -> Result<SampleRun> {
    let trajs: Vec<Trajectory> =
        conds.par_iter().enumerate().map(|(i, c)| sample_trajectory(experts, router, cfg, *c, i)).collect::<Result<Vec<_>>>()?;
    let k = experts.len();
    let n = trajs.len().max(1) as f64;
    let audit = (0..cfg.steps)
        .map(|s| {
            let mut usage = vec![0; k];
            let mut mean_weights = vec![0.0; k];
            for tr in &trajs {
                for &u in &tr.used[s] {
                    usage[u] += 1;
                }
                for (m, w) in mean_weights.iter_mut().zip(&tr.weights[s]) {
                    *m += w / n;
                }
            }
            StepAudit {
                step: s,
                t: trajs.first().map_or(1.0 - s as f64 / cfg.steps as f64, |tr| tr.times[s]),
                usage,
                mean_weights,
                mean_velocity_norm: trajs.iter().map(|tr| tr.velocity_norms[s]).sum::<f64>() / n,
                clamp_hit_rate: trajs.iter().map(|tr| tr.clamp_rates[s]).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SampleRun { samples: trajs.iter().map(|t| t.terminal().to_vec()).collect(), conditions: conds.to_vec(), audit })
}

impl SampleRun {
    pub fn write_audit_csv(&self, path: &Path) -> Result<()> {
        let join = |v: Vec<String>| v.join(";");
        let rows: Vec<Vec<String>> = self
            .audit
            .iter()
            .map(|a| {
                let used: Vec<String> = a.usage.iter().enumerate().filter(|(_, c)| **c > 0).map(|(i, _)| i.to_string()).collect();
                vec![
                    a.step.to_string(),
                    fmt_f64(a.t),
                    join(used),
                    join(a.mean_weights.iter().map(|w| fmt_f64(*w)).collect()),
                    fmt_f64(a.mean_velocity_norm),
                    fmt_f64(a.clamp_hit_rate),
                ]
            })
            .collect();
        write_csv(path, &["step", "t", "experts", "weights", "velocity_norm", "clamp_hit_rate"], &rows)
    }

    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let dim = self.samples.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
        header.push("condition".into());
        let rows: Vec<Vec<String>> = self
            .samples
            .iter()
            .zip(&self.conditions)
            .map(|(s, c)| {
                let mut row: Vec<String> = s.iter().map(|v| fmt_f64(*v)).collect();
                row.push(c.map_or(String::new(), |c| c.to_string()));
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(path, &header, &rows)
    }
}
