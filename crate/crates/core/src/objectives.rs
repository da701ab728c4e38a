//! Forward-process corruption, regression targets, MSE loss, and the implicit
//! timestep weighting of ε- versus v-prediction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::netcore::Objective;
use crate::schedules::Schedule;

/// A corrupted training example and its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
}

/// Corrupts `x0` with a fresh standard-normal draw.
pub fn make_noisy<R: Rng + ?Sized>(x0: &[f64], t: f64, objective: Objective, schedule: &Schedule, rng: &mut R) -> Result<NoisySample> {
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    make_noisy_with(x0, &eps, t, objective, schedule)
}

/// Corrupts `x0` with the given noise.
///
/// ε-prediction uses `x_t = α_t x0 + σ_t ε` under `schedule` with target ε.
/// Velocity prediction always uses the linear path `x_t = (1 − t) x0 + t ε`
/// with target `ε − x0`.
pub fn make_noisy_with(x0: &[f64], eps: &[f64], t: f64, objective: Objective, schedule: &Schedule) -> Result<NoisySample> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has dimension {}, ε has {}", x0.len(), eps.len())));
    }
    let (x_t, target) = match objective {
        Objective::Epsilon => {
            let (a, s) = schedule.alpha_sigma(t)?;
            (x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect(), eps.to_vec())
        }
        Objective::Velocity => {
            let (a, s) = Schedule::Linear.alpha_sigma(t)?;
            (x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect(), x0.iter().zip(eps).map(|(x, e)| e - x).collect())
        }
    };
    Ok(NoisySample { x0: x0.to_vec(), eps: eps.to_vec(), t, x_t, target })
}

/// Mean-per-element squared error and its gradient with respect to `prediction`.
pub fn loss_and_grad_target(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::Shape(format!("prediction {} vs target {}", prediction.len(), target.len())));
    }
    let n = prediction.len() as f64;
    let loss = prediction.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
    let grad = prediction.iter().zip(target).map(|(p, y)| 2.0 * (p - y) / n).collect();
    Ok((loss, grad))
}

/// Implicit per-timestep weights of x̂₀ error under ε- and v-prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingProfile {
    pub t: Vec<f64>,
    /// `α² / σ²`
    pub w_eps: Vec<f64>,
    /// `1 / σ²`
    pub w_v: Vec<f64>,
    /// `1 / α²`
    pub ratio: Vec<f64>,
}

impl WeightingProfile {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let rows: Vec<Vec<String>> = (0..self.t.len())
            .map(|i| vec![fmt_f64(self.t[i]), fmt_f64(self.w_eps[i]), fmt_f64(self.w_v[i]), fmt_f64(self.ratio[i])])
            .collect();
        write_csv(path, &["t", "w_eps", "w_v", "ratio"], &rows)
    }
}

pub fn weighting_profile(schedule: &Schedule, grid: &[f64]) -> Result<WeightingProfile> {
    let mut p = WeightingProfile {
        t: Vec::with_capacity(grid.len()),
        w_eps: Vec::with_capacity(grid.len()),
        w_v: Vec::with_capacity(grid.len()),
        ratio: Vec::with_capacity(grid.len()),
    };
    for &t in grid {
        let (a, s) = schedule.alpha_sigma(t)?;
        if a <= 0.0 || s <= 0.0 {
            return Err(Error::Domain(format!("weighting undefined at t = {t} (α = {a}, σ = {s})")));
        }
        p.t.push(t);
        p.w_eps.push(a * a / (s * s));
        p.w_v.push(1.0 / (s * s));
        p.ratio.push(1.0 / (a * a));
    }
    Ok(p)
}

/// The v-parameterization target `α ε − σ x0` of a variance-preserving
/// process. Not the ODE velocity used for sampling.
pub fn vp_v_target(x0: &[f64], eps: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    x0.iter().zip(eps).map(|(x, e)| alpha * e - sigma * x).collect()
}

/// Clean-sample estimate from an ε-prediction: `(x_t − σ ε̂) / α`.
pub fn x0_from_eps(x_t: &[f64], eps_hat: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    x_t.iter().zip(eps_hat).map(|(x, e)| (x - sigma * e) / alpha).collect()
}

/// Clean-sample estimate from a v-parameterization prediction: `α x_t − σ v̂`.
pub fn x0_from_vp_v(x_t: &[f64], v_hat: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    x_t.iter().zip(v_hat).map(|(x, v)| alpha * x - sigma * v).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-sample error ratios for random predictions at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingCheck {
    /// `‖ε̂ − ε‖² / ‖x̂₀ − x0‖²` per sample.
    pub eps_ratios: Vec<f64>,
    /// `‖v̂ − v‖² / ‖x̂₀ − x0‖²` per sample; empty unless `α² + σ² = 1`.
    pub v_ratios: Vec<f64>,
}

/// Draws `batch` random `(x0, ε, prediction)` triples and measures the error
/// ratios of both parameterizations.
pub fn empirical_weighting_check<R: Rng + ?Sized>(
    schedule: &Schedule,
    t: f64,
    dim: usize,
    batch: usize,
    rng: &mut R,
) -> Result<WeightingCheck> {
    let (a, s) = schedule.alpha_sigma(t)?;
    if a <= 0.0 || s <= 0.0 {
        return Err(Error::Domain(format!("t = {t} is not interior")));
    }
    let vp = (a * a + s * s - 1.0).abs() < 1e-12;
    let mut draw = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut out = WeightingCheck { eps_ratios: Vec::with_capacity(batch), v_ratios: Vec::new() };
    for _ in 0..batch {
        let x0 = draw(dim, 1.0);
        let eps = draw(dim, 1.0);
        let x_t: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();

        let eps_hat: Vec<f64> = eps.iter().zip(draw(dim, 0.5)).map(|(e, d)| e + d).collect();
        let x0_hat = x0_from_eps(&x_t, &eps_hat, a, s);
        out.eps_ratios.push(sq_dist(&eps_hat, &eps) / sq_dist(&x0_hat, &x0));

        if vp {
            let v = vp_v_target(&x0, &eps, a, s);
            let v_hat: Vec<f64> = v.iter().zip(draw(dim, 0.5)).map(|(e, d)| e + d).collect();
            let x0_hat = x0_from_vp_v(&x_t, &v_hat, a, s);
            out.v_ratios.push(sq_dist(&v_hat, &v) / sq_dist(&x0_hat, &x0));
        }
    }
    Ok(out)
}
