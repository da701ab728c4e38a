//! Metrics and the desk-scale experiment harnesses.
//!
//! Fréchet distance is computed on raw coordinates and diversity as mean
//! Euclidean pairwise distance, so absolute values are only comparable
//! within one benchmark.

mod metrics;
mod studies;

pub use metrics::{diversity, frechet_distance, frechet_from_moments, sample_moments, Diversity, Frechet, EIGEN_DUST, REGULARIZATION};
pub use studies::{run_study, write_study_csv, StudyConfig, StudyKind, StudyRow, STUDY_CSV_HEADER};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::conversion::{recover_x0, ConversionConfig};
use crate::error::{Error, Result};
use crate::netcore::Objective;
use crate::partition::{ClusterAssignment, SyntheticDataset};
use crate::rng;
use crate::sampler::{initial_noise, time_grid, Denoiser, Router};
use crate::schedules::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub frechet: f64,
    pub frechet_regularized: bool,
    pub diversity_mean_pairwise: f64,
    pub intra_condition_diversity: Option<f64>,
    pub router_accuracy_curve: Vec<(f64, f64)>,
    pub sample_count: usize,
}

impl MetricReport {
    /// Scores `samples` against target moments. `groups` holds one condition
    /// id per sample for the intra-condition diversity.
    pub fn score(samples: &[Vec<f64>], groups: Option<&[usize]>, target: &(Vec<f64>, nalgebra::DMatrix<f64>)) -> Result<Self> {
        let (m, c) = sample_moments(samples)?;
        let f = frechet_from_moments(&m, &c, &target.0, &target.1)?;
        let d = diversity(samples, groups)?;
        Ok(Self {
            frechet: f.value,
            frechet_regularized: f.regularized,
            diversity_mean_pairwise: d.mean_pairwise,
            intra_condition_diversity: d.intra,
            router_accuracy_curve: Vec::new(),
            sample_count: samples.len(),
        })
    }
}

/// Ancestral sampling of an ε-expert on the grid `t_i = 1 − i/steps`.
///
/// Each step predicts `x̂0` from ε (with the floor and clamp of `conversion`)
/// and draws from the Gaussian posterior `q(x_s | x_t, x̂0)`. Trajectory `i`
/// starts from the same noise as the ODE sampler and draws its step noise
/// from stream `(seed, "baseline/noise", i)`. One step is a single jump to
/// `x̂0` and gives poor samples.
pub fn native_ddpm_baseline(
    expert: &(dyn Denoiser + Sync),
    steps: usize,
    seed: u64,
    conds: &[Option<usize>],
    conversion: &ConversionConfig,
) -> Result<Vec<Vec<f64>>> {
    if expert.objective() != Objective::Epsilon {
        return Err(Error::Type(format!("native DDPM sampling needs an ε-expert, got {}", expert.objective().name())));
    }
    if steps == 0 {
        return Err(Error::Config("baseline needs at least one step".into()));
    }
    conversion.validate()?;
    let schedule = expert.schedule().clone();
    let grid = time_grid(steps);
    let dim = expert.data_dim();
    conds
        .par_iter()
        .enumerate()
        .map(|(i, &cond)| {
            let mut x = initial_noise(seed, i, dim);
            let mut r = rng::stream(seed, "baseline/noise", i as u64);
            for w in grid.windows(2) {
                x = posterior_step(expert, &schedule, &x, w[0], w[1], cond, conversion, &mut r)?;
            }
            Ok(x)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn posterior_step(
    expert: &(dyn Denoiser + Sync),
    schedule: &Schedule,
    x: &[f64],
    t: f64,
    s: f64,
    cond: Option<usize>,
    conversion: &ConversionConfig,
    r: &mut rng::StreamRng,
) -> Result<Vec<f64>> {
    let eps = expert.predict(x, t, cond)?;
    let x0 = recover_x0(x, &eps, t, schedule, conversion)?;
    let (at, st) = schedule.alpha_sigma(t)?;
    let (as_, ss) = schedule.alpha_sigma(s)?;
    let a_ts = if as_ > 0.0 { at / as_ } else { 0.0 };
    let var_ts = (st * st - a_ts * a_ts * ss * ss).max(0.0);
    let (c_x, c_0) = (a_ts * ss * ss / (st * st), as_ * var_ts / (st * st));
    let std = (var_ts * ss * ss / (st * st)).sqrt();
    let out: Vec<f64> = x
        .iter()
        .zip(&x0)
        .map(|(xt, x0)| c_x * xt + c_0 * x0 + if std > 0.0 { std * r.sample::<f64, _>(StandardNormal) } else { 0.0 })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: 0, t, msg: "native DDPM step produced a non-finite state".into() });
    }
    Ok(out)
}

/// Fraction of corrupted data points whose router argmax equals their
/// cluster, at each probe time, with `per_time` draws from stream
/// `(seed, "eval/router", probe)`.
pub fn router_accuracy_curve(
    router: &(dyn Router + Sync),
    data: &SyntheticDataset,
    assignment: &ClusterAssignment,
    schedule: &Schedule,
    times: &[f64],
    per_time: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if data.is_empty() || assignment.assignment.len() != data.len() {
        return Err(Error::Shape("assignment does not cover the dataset".into()));
    }
    times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let (a, s) = schedule.alpha_sigma(t)?;
            let mut r = rng::stream(seed, "eval/router", j as u64);
            let mut hits = 0;
            for _ in 0..per_time {
                let i = r.random_range(0..data.len());
                let x: Vec<f64> = data.points[i].iter().map(|v| a * v + s * r.sample::<f64, _>(StandardNormal)).collect();
                let logits = router.logits(&x, t)?;
                let best = (0..logits.len()).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
                hits += usize::from(best == assignment.assignment[i]);
            }
            Ok((t, hits as f64 / per_time.max(1) as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{MixtureOracle, OracleExpert};
    use crate::partition::{Covariance, MixtureSpec};

    fn single_gaussian() -> MixtureOracle {
        let spec = MixtureSpec::new(vec![1.0], vec![vec![2.0, -1.0]], vec![Covariance::isotropic(2, 0.25)]).unwrap();
        MixtureOracle::new(&spec, Schedule::Cosine).unwrap()
    }

    #[test]
    fn oracle_baseline_reaches_data() {
        let oracle = single_gaussian();
        let expert = OracleExpert::epsilon(&oracle, Schedule::Cosine);
        let conds = vec![None; 400];
        let xs = native_ddpm_baseline(&expert, 1000, 3, &conds, &ConversionConfig::default()).unwrap();
        let (m, c) = oracle.data_moments();
        let (sm, sc) = sample_moments(&xs).unwrap();
        let f = frechet_from_moments(&sm, &sc, &m, &c).unwrap();
        assert!(f.value < 0.1, "{}", f.value);
    }

    #[test]
    fn baseline_is_deterministic_and_single_step_runs() {
        let oracle = single_gaussian();
        let expert = OracleExpert::epsilon(&oracle, Schedule::Cosine);
        let conds = vec![None; 8];
        let a = native_ddpm_baseline(&expert, 20, 9, &conds, &ConversionConfig::default()).unwrap();
        let b = native_ddpm_baseline(&expert, 20, 9, &conds, &ConversionConfig::default()).unwrap();
        assert_eq!(a, b);
        let one = native_ddpm_baseline(&expert, 1, 9, &conds, &ConversionConfig::default()).unwrap();
        assert!(one.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn baseline_rejects_velocity_expert() {
        let expert = OracleExpert::velocity(&single_gaussian());
        let r = native_ddpm_baseline(&expert, 10, 0, &[None], &ConversionConfig::default());
        assert!(matches!(r, Err(Error::Type(_))));
    }

    #[test]
    fn report_against_own_moments() {
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1, (i as f64).cos()]).collect();
        let target = sample_moments(&xs).unwrap();
        let r = MetricReport::score(&xs, None, &target).unwrap();
        assert!(r.frechet < 1e-10);
        assert_eq!(r.sample_count, 30);
    }
}
