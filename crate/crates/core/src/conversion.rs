//! Schedule-aware conversion of ε-predictions into ODE velocities.
//!
//! ```text
//! x̂₀ = clamp((x_t − σ_t ε̂) / max(α_t, α_floor), −r, r)
//! v  = s(t) · (α'_t x̂₀ + σ'_t ε̂)
//! ```
//!
//! Derivatives come from finite differences with step `derivative_h`. For the
//! linear schedule with every safeguard off this reduces to `v = ε̂ − x̂₀`.

use crate::error::{Error, Result};
use crate::schedules::{Schedule, DERIVATIVE_H};

/// Velocity rescaling applied near the noise end of the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    /// `min(1, 15 / (1 + e^{10(t − 0.85)}))` for `t > 0.85`, else 1.
    Sigmoid,
    /// 0.88 above 0.85, 0.93 on (0.6, 0.85], 0.96 at or below 0.6.
    Piecewise,
    Off,
}

impl ScalingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(ScalingMode::Sigmoid),
            "piecewise" => Ok(ScalingMode::Piecewise),
            "off" | "none" => Ok(ScalingMode::Off),
            other => Err(Error::Config(format!("unknown scaling mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::Sigmoid => "sigmoid",
            ScalingMode::Piecewise => "piecewise",
            ScalingMode::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConversionConfig {
    /// Symmetric clamp range for x̂₀; `None` disables clamping.
    pub clamp: Option<f64>,
    /// Lower bound on α in the x̂₀ division; `None` disables it.
    pub alpha_floor: Option<f64>,
    pub scaling: ScalingMode,
    pub derivative_h: f64,
}

pub const LATENT_CLAMP: f64 = 20.0;
pub const PIXEL_CLAMP: f64 = 5.0;
pub const ALPHA_FLOOR: f64 = 0.01;

impl Default for ConversionConfig {
    fn default() -> Self {
        Self { clamp: Some(LATENT_CLAMP), alpha_floor: Some(ALPHA_FLOOR), scaling: ScalingMode::Piecewise, derivative_h: DERIVATIVE_H }
    }
}

impl ConversionConfig {
    /// Pure conversion math with every safeguard disabled.
    pub fn exact() -> Self {
        Self { clamp: None, alpha_floor: None, scaling: ScalingMode::Off, derivative_h: DERIVATIVE_H }
    }

    /// Default safeguards, with velocity scaling only for curved schedules.
    pub fn for_schedule(schedule: &Schedule) -> Self {
        let scaling = match schedule {
            Schedule::Linear => ScalingMode::Off,
            _ => ScalingMode::Piecewise,
        };
        Self { scaling, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.clamp {
            if !(r > 0.0) {
                return Err(Error::Config(format!("clamp range must be > 0, got {r}")));
            }
        }
        if let Some(f) = self.alpha_floor {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("alpha floor must lie in (0, 1), got {f}")));
            }
        }
        if !(self.derivative_h > 0.0 && self.derivative_h < 0.5) {
            return Err(Error::Config(format!("derivative step must lie in (0, 0.5), got {}", self.derivative_h)));
        }
        Ok(())
    }
}

/// Velocity scale `s(t)` for the given mode.
pub fn adaptive_scale(t: f64, mode: ScalingMode) -> f64 {
    match mode {
        ScalingMode::Off => 1.0,
        ScalingMode::Sigmoid => {
            if t > 0.85 {
                (15.0 / (1.0 + (10.0 * (t - 0.85)).exp())).min(1.0)
            } else {
                1.0
            }
        }
        ScalingMode::Piecewise => {
            if t > 0.85 {
                0.88
            } else if t > 0.6 {
                0.93
            } else {
                0.96
            }
        }
    }
}

/// Diagnostics from one conversion.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConversionAudit {
    /// Coordinates of x̂₀ that were clamped.
    pub clamp_hits: usize,
    pub coords: usize,
    /// Whether the α floor replaced α_t.
    pub floored: bool,
    pub scale: f64,
}

fn check_inputs(x_t: &[f64], eps: &[f64]) -> Result<()> {
    if x_t.len() != eps.len() {
        return Err(Error::Shape(format!("x_t has dimension {}, ε̂ has {}", x_t.len(), eps.len())));
    }
    if x_t.iter().chain(eps).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite conversion input".into()));
    }
    Ok(())
}

fn recover_audited(
    x_t: &[f64],
    eps: &[f64],
    t: f64,
    schedule: &Schedule,
    cfg: &ConversionConfig,
    audit: &mut ConversionAudit,
) -> Result<Vec<f64>> {
    check_inputs(x_t, eps)?;
    let (a, s) = schedule.alpha_sigma(t)?;
    let denom = match cfg.alpha_floor {
        Some(f) if a < f => {
            audit.floored = true;
            f
        }
        _ => a,
    };
    if denom == 0.0 {
        return Err(Error::Numeric(format!("α = 0 at t = {t} with no α floor")));
    }
    audit.coords += x_t.len();
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(x, e)| {
            let v = (x - s * e) / denom;
            match cfg.clamp {
                Some(r) if v.abs() > r => {
                    audit.clamp_hits += 1;
                    v.clamp(-r, r)
                }
                _ => v,
            }
        })
        .collect())
}

/// Clean-sample estimate x̂₀ from an ε-prediction.
pub fn recover_x0(x_t: &[f64], eps: &[f64], t: f64, schedule: &Schedule, cfg: &ConversionConfig) -> Result<Vec<f64>> {
    recover_audited(x_t, eps, t, schedule, cfg, &mut ConversionAudit::default())
}

/// Converted velocity together with its audit record.
pub fn eps_to_velocity_audited(
    x_t: &[f64],
    eps: &[f64],
    t: f64,
    schedule: &Schedule,
    cfg: &ConversionConfig,
) -> Result<(Vec<f64>, ConversionAudit)> {
    let mut audit = ConversionAudit::default();
    let x0 = recover_audited(x_t, eps, t, schedule, cfg, &mut audit)?;
    let (da, ds) = schedule.derivatives_with_step(t, cfg.derivative_h)?;
    let scale = adaptive_scale(t, cfg.scaling);
    audit.scale = scale;
    let v = x0.iter().zip(eps).map(|(x, e)| scale * (da * x + ds * e)).collect();
    Ok((v, audit))
}

pub fn eps_to_velocity(x_t: &[f64], eps: &[f64], t: f64, schedule: &Schedule, cfg: &ConversionConfig) -> Result<Vec<f64>> {
    Ok(eps_to_velocity_audited(x_t, eps, t, schedule, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn recover_examples() {
        let cfg = ConversionConfig::default();
        assert_eq!(recover_x0(&[0.7, -0.2], &[3.0, 1.0], 0.0, &Schedule::Cosine, &cfg).unwrap(), vec![0.7, -0.2]);
        let x = recover_x0(&[0.5], &[0.2], 0.5, &Schedule::Linear, &cfg).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15);
        // α = 0.001 at t = 0.999 on the linear schedule; σ ε̂ chosen so the numerator is 1.
        let t = 0.999;
        let x_t = 1.0 + t * 0.5;
        let (v, audit) = {
            let mut a = ConversionAudit::default();
            (recover_audited(&[x_t], &[0.5], t, &Schedule::Linear, &cfg, &mut a).unwrap(), a)
        };
        assert_eq!(v, vec![20.0]);
        assert!(audit.floored);
        assert_eq!(audit.clamp_hits, 1);
    }

    #[test]
    fn linear_velocity_example() {
        let v = eps_to_velocity(&[0.5], &[0.2], 0.5, &Schedule::Linear, &ConversionConfig::exact()).unwrap();
        assert!((v[0] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_gives_fm_target() {
        let mut r = rng::stream(2, "test/perfect", 0);
        for _ in 0..100 {
            let t: f64 = r.random_range(0.01..0.98);
            let x0 = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let e = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
            let x_t: Vec<f64> = x0.iter().zip(&e).map(|(x, n)| (1.0 - t) * x + t * n).collect();
            let v = eps_to_velocity(&x_t, &e, t, &Schedule::Linear, &ConversionConfig::exact()).unwrap();
            for i in 0..2 {
                assert!((v[i] - (e[i] - x0[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cosine_velocity_coefficients() {
        // α' = −(π/2) sin(π/4), σ' = (π/2) cos(π/4), both ±1.1107207345...
        let c = std::f64::consts::FRAC_PI_2 * std::f64::consts::FRAC_1_SQRT_2;
        assert!((c - 1.1107207).abs() < 1e-7);
        let cfg = ConversionConfig::exact();
        let x_t = [0.3];
        let eps = [0.2];
        let x0 = recover_x0(&x_t, &eps, 0.5, &Schedule::Cosine, &cfg).unwrap();
        let v = eps_to_velocity(&x_t, &eps, 0.5, &Schedule::Cosine, &cfg).unwrap();
        assert!((v[0] - (-c * x0[0] + c * eps[0])).abs() < 1e-8);
    }

    #[test]
    fn scale_examples() {
        assert_eq!(adaptive_scale(0.9, ScalingMode::Piecewise), 0.88);
        assert_eq!(adaptive_scale(0.7, ScalingMode::Piecewise), 0.93);
        assert_eq!(adaptive_scale(0.3, ScalingMode::Piecewise), 0.96);
        assert_eq!(adaptive_scale(0.85, ScalingMode::Sigmoid), 1.0);
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            for m in [ScalingMode::Sigmoid, ScalingMode::Piecewise, ScalingMode::Off] {
                let s = adaptive_scale(t, m);
                assert!(s > 0.0 && s <= 1.0);
            }
        }
    }

    #[test]
    fn linear_equivalence_over_random_inputs() {
        let mut r = rng::stream(5, "test/linear-eq", 0);
        let cfg = ConversionConfig::exact();
        for _ in 0..10_000 {
            let t: f64 = r.random_range(0.0..=0.98);
            let x: f64 = r.random_range(-5.0..5.0);
            let e: f64 = r.random_range(-5.0..5.0);
            let v = eps_to_velocity(&[x], &[e], t, &Schedule::Linear, &cfg).unwrap()[0];
            let expect = e - (x - t * e) / (1.0 - t);
            assert!((v - expect).abs() <= 1e-12 * expect.abs().max(1.0), "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn clamp_bounds_output() {
        let mut r = rng::stream(6, "test/clamp", 0);
        let cfg = ConversionConfig { clamp: Some(PIXEL_CLAMP), ..ConversionConfig::default() };
        for _ in 0..1000 {
            let t: f64 = r.random();
            let x_t: Vec<f64> = (0..4).map(|_| r.random_range(-50.0..50.0)).collect();
            let e: Vec<f64> = (0..4).map(|_| r.random_range(-50.0..50.0)).collect();
            let x0 = recover_x0(&x_t, &e, t, &Schedule::Cosine, &cfg).unwrap();
            assert!(x0.iter().all(|v| v.abs() <= PIXEL_CLAMP));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = ConversionConfig::exact();
        assert!(matches!(recover_x0(&[f64::NAN], &[0.0], 0.5, &Schedule::Linear, &cfg), Err(Error::Numeric(_))));
        assert!(matches!(recover_x0(&[1.0], &[0.0], 1.0, &Schedule::Linear, &cfg), Err(Error::Numeric(_))));
        assert!(ConversionConfig { alpha_floor: Some(1.5), ..cfg }.validate().is_err());
    }
}
