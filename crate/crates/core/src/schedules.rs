//! Noise schedules `(α_t, σ_t)` on continuous time `t ∈ [0, 1]`, their time
//! derivatives, and the mapping onto the discrete index table `{0..999}`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Step used for finite-difference schedule derivatives.
pub const DERIVATIVE_H: f64 = 1e-4;

/// Largest discrete timestep index.
pub const MAX_INDEX: usize = 999;

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `α_t = 1 − t`, `σ_t = t`.
    Linear,
    /// `α_t = cos(πt/2)`, `σ_t = sin(πt/2)`.
    Cosine,
    /// Tabulated `(t, α, σ)` knots with linear interpolation.
    Tabulated(ScheduleTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    t: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl ScheduleTable {
    pub fn new(t: Vec<f64>, alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let n = t.len();
        if n < 2 || alpha.len() != n || sigma.len() != n {
            return Err(Error::Domain("schedule table needs >= 2 knots of equal length".into()));
        }
        if t[0] != 0.0 || t[n - 1] != 1.0 {
            return Err(Error::Domain("schedule table must span t = 0 to t = 1".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("schedule table times must be strictly increasing".into()));
        }
        if (alpha[0] - 1.0).abs() > 1e-12 || sigma[0].abs() > 1e-12 {
            return Err(Error::Domain("schedule table must start at α = 1, σ = 0".into()));
        }
        if alpha.windows(2).any(|w| w[1] > w[0]) || sigma.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("α must be nonincreasing and σ nondecreasing".into()));
        }
        if alpha.iter().chain(&sigma).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("schedule table values must be finite and >= 0".into()));
        }
        Ok(Self { t, alpha, sigma })
    }

    /// Variance-preserving table from `α` knots, with `σ = sqrt(1 − α²)`.
    pub fn variance_preserving(t: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        let sigma = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Self::new(t, alpha, sigma)
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.t.iter().zip(&self.alpha).zip(&self.sigma).map(|((t, a), s)| (*t, *a, *s))
    }

    fn segment(&self, t: f64) -> usize {
        let i = self.t.partition_point(|&k| k <= t);
        i.clamp(1, self.t.len() - 1) - 1
    }

    fn eval(&self, t: f64) -> (f64, f64) {
        let i = self.segment(t);
        let w = (t - self.t[i]) / (self.t[i + 1] - self.t[i]);
        (self.alpha[i] + w * (self.alpha[i + 1] - self.alpha[i]), self.sigma[i] + w * (self.sigma[i + 1] - self.sigma[i]))
    }

    fn slope(&self, t: f64) -> (f64, f64) {
        let i = self.segment(t);
        let dt = self.t[i + 1] - self.t[i];
        ((self.alpha[i + 1] - self.alpha[i]) / dt, (self.sigma[i + 1] - self.sigma[i]) / dt)
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("t = {t} outside [0, 1]")))
    }
}

impl Schedule {
    /// One-byte tag used in checkpoint headers.
    pub fn tag(&self) -> u8 {
        match self {
            Schedule::Linear => 0,
            Schedule::Cosine => 1,
            Schedule::Tabulated(_) => 2,
        }
    }

    /// `linear` or `cosine`; tabulated schedules are loaded from files.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`; expected linear or cosine"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
            Schedule::Tabulated(_) => "vp-generic",
        }
    }

    /// `(α_t, σ_t)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        Ok(self.eval(t))
    }

    fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            Schedule::Linear => (1.0 - t, t),
            Schedule::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                (c, s)
            }
            Schedule::Tabulated(table) => table.eval(t),
        }
    }

    /// Finite-difference `(dα/dt, dσ/dt)` with step [`DERIVATIVE_H`].
    pub fn derivatives(&self, t: f64) -> Result<(f64, f64)> {
        self.derivatives_with_step(t, DERIVATIVE_H)
    }

    /// Finite-difference derivatives with step `h`. Linear returns the exact
    /// `(−1, +1)`. Central differences are used in the interior; within `h`
    /// of either boundary a second-order one-sided stencil is used instead.
    pub fn derivatives_with_step(&self, t: f64, h: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        if !(h > 0.0 && h < 0.5) {
            return Err(Error::Domain(format!("derivative step h = {h} must be in (0, 0.5)")));
        }
        if matches!(self, Schedule::Linear) {
            return Ok((-1.0, 1.0));
        }
        let f = |s: f64| self.eval(s);
        let (da, ds) = if t < h {
            let (a0, s0) = f(t);
            let (a1, s1) = f(t + h);
            let (a2, s2) = f(t + 2.0 * h);
            ((-3.0 * a0 + 4.0 * a1 - a2) / (2.0 * h), (-3.0 * s0 + 4.0 * s1 - s2) / (2.0 * h))
        } else if t > 1.0 - h {
            let (a0, s0) = f(t);
            let (a1, s1) = f(t - h);
            let (a2, s2) = f(t - 2.0 * h);
            ((3.0 * a0 - 4.0 * a1 + a2) / (2.0 * h), (3.0 * s0 - 4.0 * s1 + s2) / (2.0 * h))
        } else {
            let (ap, sp) = f(t + h);
            let (am, sm) = f(t - h);
            ((ap - am) / (2.0 * h), (sp - sm) / (2.0 * h))
        };
        Ok((da, ds))
    }

    /// Closed-form derivatives (piecewise slopes for tabulated schedules).
    pub fn analytic_derivatives(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        Ok(match self {
            Schedule::Linear => (-1.0, 1.0),
            Schedule::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                (-FRAC_PI_2 * s, FRAC_PI_2 * c)
            }
            Schedule::Tabulated(table) => table.slope(t),
        })
    }
}

/// Continuous time to discrete index: `round(999 t)` with ties away from
/// zero, clamped to `[0, 999]`.
pub fn to_discrete_index(t: f64) -> usize {
    if t.is_nan() {
        return 0;
    }
    (MAX_INDEX as f64 * t).round().clamp(0.0, MAX_INDEX as f64) as usize
}

#[cfg(test)]
mod tests {
    // Expected values are written out by hand.
    #![allow(clippy::approx_constant)]

    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn linear_values() {
        let (a, s) = Schedule::Linear.alpha_sigma(0.3).unwrap();
        assert!((a - 0.7).abs() < 1e-15 && (s - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cosine_values() {
        assert_eq!(Schedule::Cosine.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (a, s) = Schedule::Cosine.alpha_sigma(0.5).unwrap();
        assert!((a - 0.70710678).abs() < 1e-8);
        assert!((s - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn out_of_range_is_domain_error() {
        assert!(matches!(Schedule::Linear.alpha_sigma(1.5), Err(Error::Domain(_))));
        assert!(matches!(Schedule::Cosine.alpha_sigma(-0.1), Err(Error::Domain(_))));
        assert!(Schedule::Cosine.derivatives(f64::NAN).is_err());
    }

    #[test]
    fn cosine_is_variance_preserving_on_grid() {
        let worst = (0..=1000)
            .map(|i| {
                let (a, s) = Schedule::Cosine.alpha_sigma(i as f64 / 1000.0).unwrap();
                (a * a + s * s - 1.0).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn boundaries_and_monotonicity() {
        let table = ScheduleTable::variance_preserving(vec![0.0, 0.25, 0.5, 1.0], vec![1.0, 0.9, 0.6, 0.0]).unwrap();
        for sched in [Schedule::Linear, Schedule::Cosine, Schedule::Tabulated(table)] {
            let (a0, s0) = sched.alpha_sigma(0.0).unwrap();
            assert!((a0 - 1.0).abs() < 1e-12 && s0.abs() < 1e-12);
            let mut prev = sched.alpha_sigma(0.0).unwrap();
            for i in 1..=1000 {
                let cur = sched.alpha_sigma(i as f64 / 1000.0).unwrap();
                assert!(cur.0 <= prev.0 + 1e-15 && cur.1 >= prev.1 - 1e-15);
                prev = cur;
            }
        }
    }

    #[test]
    fn linear_derivatives_exact() {
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(Schedule::Linear.derivatives(t).unwrap(), (-1.0, 1.0));
        }
    }

    #[test]
    fn cosine_derivative_examples() {
        let (da, ds) = Schedule::Cosine.derivatives(0.5).unwrap();
        // −(π/2) sin(π/4) and (π/2) cos(π/4), evaluated by hand.
        assert!((da + 1.1107207345).abs() < 1e-6);
        assert!((ds - 1.1107207345).abs() < 1e-6);
        let (da, ds) = Schedule::Cosine.derivatives(0.0).unwrap();
        assert!(da.abs() < 1e-4);
        assert!((ds - PI / 2.0).abs() < 1e-4);
        let (da, ds) = Schedule::Cosine.derivatives(1.0).unwrap();
        assert!((da + PI / 2.0).abs() < 1e-4);
        assert!(ds.abs() < 1e-4);
    }

    #[test]
    fn finite_differences_match_analytic_interior() {
        let mut worst: f64 = 0.0;
        for i in 0..=980 {
            let t = 0.01 + i as f64 * 0.001;
            let fd = Schedule::Cosine.derivatives(t).unwrap();
            let an = Schedule::Cosine.analytic_derivatives(t).unwrap();
            worst = worst.max((fd.0 - an.0).abs()).max((fd.1 - an.1).abs());
        }
        assert!(worst < 1e-6, "worst deviation {worst}");
    }

    #[test]
    fn discrete_index_examples() {
        assert_eq!(to_discrete_index(1.0), 999);
        assert_eq!(to_discrete_index(0.0), 0);
        assert_eq!(to_discrete_index(0.5), 500);
        assert_eq!(to_discrete_index(-3.0), 0);
        assert_eq!(to_discrete_index(7.0), 999);
    }

    #[test]
    fn discrete_index_monotone() {
        let mut prev = 0;
        for i in 0..=10_000 {
            let idx = to_discrete_index(i as f64 / 10_000.0);
            assert!(idx >= prev);
            prev = idx;
        }
    }

    #[test]
    fn table_rejects_bad_knots() {
        assert!(ScheduleTable::new(vec![0.0, 1.0], vec![0.9, 0.0], vec![0.0, 1.0]).is_err());
        assert!(ScheduleTable::new(vec![0.0, 0.5], vec![1.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(ScheduleTable::new(vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn tags() {
        assert_eq!(Schedule::Linear.tag(), 0);
        assert_eq!(Schedule::Cosine.tag(), 1);
    }
}
