//! Closed-form posteriors, denoisers and velocities for Gaussian-mixture data.
//!
//! Under component `k` with `x0 ~ N(μ_k, Σ_k)` and `x_t = α x0 + σ ε`:
//!
//! ```text
//! S_k          = α² Σ_k + σ² I
//! E[x0 | x_t,k] = μ_k + α Σ_k S_k⁻¹ (x_t − α μ_k)
//! E[ε  | x_t,k] = σ S_k⁻¹ (x_t − α μ_k)
//! u_k          = α' E[x0 | x_t,k] + σ' E[ε | x_t,k]
//! ```
//!
//! The marginal quantities are computed separately from the mixture score
//! `∇ log p_t`, which gives `E[x0 | x_t] = (x_t + σ² ∇ log p_t) / α` and
//! `E[ε | x_t] = −σ ∇ log p_t`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::netcore::Objective;
use crate::partition::{Covariance, MixtureSpec};
use crate::sampler::{Denoiser, Router};
use crate::schedules::Schedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
enum CovForm {
    Diagonal(Vec<f64>),
    Full(DMatrix<f64>),
}

/// Per-component quantities at one `(x_t, t)`.
struct ComponentTerms {
    log_density: f64,
    /// `S⁻¹ (x_t − α μ)`
    whitened: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MixtureOracle {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<CovForm>,
    conditions: Vec<usize>,
    schedule: Schedule,
    dim: usize,
}

impl MixtureOracle {
    pub fn new(spec: &MixtureSpec, schedule: Schedule) -> Result<Self> {
        spec.validate()?;
        let dim = spec.dim();
        let covs = spec
            .covariances
            .iter()
            .map(|c| match c {
                Covariance::Diagonal(v) => CovForm::Diagonal(v.clone()),
                Covariance::Full(_) => CovForm::Full(c.to_matrix(dim)),
            })
            .collect();
        Ok(Self { weights: spec.weights.clone(), means: spec.means.clone(), covs, conditions: spec.conditions.clone(), schedule, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same mixture under a different schedule.
    pub fn with_schedule(&self, schedule: Schedule) -> Self {
        Self { schedule, ..self.clone() }
    }

    /// Sub-mixture over `components` with renormalized weights.
    pub fn restrict(&self, components: &[usize]) -> Result<Self> {
        if components.is_empty() || components.iter().any(|&k| k >= self.components()) {
            return Err(Error::Spec(format!("invalid component subset {components:?}")));
        }
        let total: f64 = components.iter().map(|&k| self.weights[k]).sum();
        Ok(Self {
            weights: components.iter().map(|&k| self.weights[k] / total).collect(),
            means: components.iter().map(|&k| self.means[k].clone()).collect(),
            covs: components.iter().map(|&k| self.covs[k].clone()).collect(),
            conditions: components.iter().map(|&k| self.conditions[k]).collect(),
            schedule: self.schedule.clone(),
            dim: self.dim,
        })
    }

    /// Sub-mixture of the components carrying condition label `cond`.
    pub fn conditional(&self, cond: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..self.components()).filter(|&k| self.conditions[k] == cond).collect();
        if idx.is_empty() {
            return Err(Error::Spec(format!("no component carries condition {cond}")));
        }
        self.restrict(&idx)
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("x_t has dimension {}, oracle has {}", x.len(), self.dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite oracle input".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn check_interior(&self, x: &[f64], t: f64) -> Result<()> {
        self.check(x, t)?;
        if t <= 0.0 || t >= 1.0 {
            return Err(Error::Domain(format!("t = {t} must be strictly inside (0, 1)")));
        }
        Ok(())
    }

    fn terms(&self, k: usize, x: &[f64], a: f64, s: f64) -> Result<ComponentTerms> {
        let mu = &self.means[k];
        let r: Vec<f64> = x.iter().zip(mu).map(|(x, m)| x - a * m).collect();
        match &self.covs[k] {
            CovForm::Diagonal(v) => {
                let mut log_det = 0.0;
                let mut quad = 0.0;
                let mut whitened = Vec::with_capacity(self.dim);
                for (ri, vi) in r.iter().zip(v) {
                    let var = a * a * vi + s * s;
                    if !(var > 0.0) {
                        return Err(Error::Numeric("degenerate marginal covariance".into()));
                    }
                    log_det += var.ln();
                    quad += ri * ri / var;
                    whitened.push(ri / var);
                }
                Ok(ComponentTerms { log_density: -0.5 * (quad + log_det + self.dim as f64 * LN_2PI), whitened })
            }
            CovForm::Full(sigma) => {
                let cov = sigma * (a * a) + DMatrix::identity(self.dim, self.dim) * (s * s);
                let chol: Cholesky<f64, Dyn> = cov.cholesky().ok_or_else(|| Error::Numeric("degenerate marginal covariance".into()))?;
                let rv = DVector::from_column_slice(&r);
                let w = chol.solve(&rv);
                let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                let quad = rv.dot(&w);
                Ok(ComponentTerms {
                    log_density: -0.5 * (quad + log_det + self.dim as f64 * LN_2PI),
                    whitened: w.iter().copied().collect(),
                })
            }
        }
    }

    fn sigma_times(&self, k: usize, v: &[f64]) -> Vec<f64> {
        match &self.covs[k] {
            CovForm::Diagonal(d) => v.iter().zip(d).map(|(a, b)| a * b).collect(),
            CovForm::Full(m) => (m * DVector::from_column_slice(v)).iter().copied().collect(),
        }
    }

    fn posterior_from_logs(&self, logs: &[f64]) -> Vec<f64> {
        let lw: Vec<f64> = logs.iter().zip(&self.weights).map(|(l, w)| l + w.ln()).collect();
        let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Exact `p_t(k | x_t)`. At `t = 1` the data carries no information and
    /// the prior weights are returned.
    pub fn posterior(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        if t >= 1.0 {
            return Ok(self.weights.clone());
        }
        let (a, s) = self.schedule.alpha_sigma(t)?;
        let logs = (0..self.components()).map(|k| self.terms(k, x, a, s).map(|c| c.log_density)).collect::<Result<Vec<_>>>()?;
        Ok(self.posterior_from_logs(&logs))
    }

    /// Posterior mass summed within groups: `groups[k]` is the group of component `k`.
    pub fn group_posterior(&self, x: &[f64], t: f64, groups: &[usize], group_count: usize) -> Result<Vec<f64>> {
        if groups.len() != self.components() || groups.iter().any(|&g| g >= group_count) {
            return Err(Error::Shape("group map does not match the mixture".into()));
        }
        let p = self.posterior(x, t)?;
        let mut out = vec![0.0; group_count];
        for (k, pk) in p.iter().enumerate() {
            out[groups[k]] += pk;
        }
        Ok(out)
    }

    /// `E[x0 | x_t, k]`.
    pub fn component_x0(&self, k: usize, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_interior(x, t)?;
        let (a, s) = self.schedule.alpha_sigma(t)?;
        let c = self.terms(k, x, a, s)?;
        let corr = self.sigma_times(k, &c.whitened);
        Ok(self.means[k].iter().zip(&corr).map(|(m, v)| m + a * v).collect())
    }

    /// `E[ε | x_t, k]`, the optimal ε-predictor for component `k`.
    pub fn optimal_eps_component(&self, k: usize, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_interior(x, t)?;
        let (a, s) = self.schedule.alpha_sigma(t)?;
        Ok(self.terms(k, x, a, s)?.whitened.iter().map(|w| s * w).collect())
    }

    /// `α' E[x0 | x_t, k] + σ' E[ε | x_t, k]` with exact schedule derivatives.
    pub fn optimal_velocity_component(&self, k: usize, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let x0 = self.component_x0(k, x, t)?;
        let eps = self.optimal_eps_component(k, x, t)?;
        let (da, ds) = self.schedule.analytic_derivatives(t)?;
        Ok(x0.iter().zip(&eps).map(|(x, e)| da * x + ds * e).collect())
    }

    /// Mixture score `∇ log p_t(x_t)`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_interior(x, t)?;
        let (a, s) = self.schedule.alpha_sigma(t)?;
        let terms = (0..self.components()).map(|k| self.terms(k, x, a, s)).collect::<Result<Vec<_>>>()?;
        let logs: Vec<f64> = terms.iter().map(|c| c.log_density).collect();
        let p = self.posterior_from_logs(&logs);
        let mut g = vec![0.0; self.dim];
        for (pk, c) in p.iter().zip(&terms) {
            for (gi, w) in g.iter_mut().zip(&c.whitened) {
                *gi -= pk * w;
            }
        }
        Ok(g)
    }

    /// `E[x0 | x_t]` from the score.
    pub fn marginal_x0(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let g = self.score(x, t)?;
        let (a, s) = self.schedule.alpha_sigma(t)?;
        Ok(x.iter().zip(&g).map(|(x, g)| (x + s * s * g) / a).collect())
    }

    /// `E[ε | x_t]` from the score.
    pub fn marginal_eps(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let g = self.score(x, t)?;
        let (_, s) = self.schedule.alpha_sigma(t)?;
        Ok(g.iter().map(|g| -s * g).collect())
    }

    /// Optimal ODE velocity of the whole mixture, computed from the score.
    pub fn optimal_velocity_marginal(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let x0 = self.marginal_x0(x, t)?;
        let eps = self.marginal_eps(x, t)?;
        let (da, ds) = self.schedule.analytic_derivatives(t)?;
        Ok(x0.iter().zip(&eps).map(|(x, e)| da * x + ds * e).collect())
    }

    /// `Σ_k p_t(k | x_t) u_k(x_t)`.
    pub fn decomposed_velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let p = self.posterior(x, t)?;
        let mut out = vec![0.0; self.dim];
        for (k, pk) in p.iter().enumerate() {
            let v = self.optimal_velocity_component(k, x, t)?;
            for (o, vi) in out.iter_mut().zip(&v) {
                *o += pk * vi;
            }
        }
        Ok(out)
    }

    /// Mean and covariance of the data distribution.
    pub fn data_moments(&self) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (a, b) in mean.iter_mut().zip(m) {
                *a += w * b;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (k, (w, m)) in self.weights.iter().zip(&self.means).enumerate() {
            let sigma = match &self.covs[k] {
                CovForm::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
                CovForm::Full(m) => m.clone(),
            };
            let dm = DVector::from_iterator(d, m.iter().zip(&mean).map(|(a, b)| a - b));
            cov += (sigma + &dm * dm.transpose()) * *w;
        }
        (mean, cov)
    }
}

/// Closed-form stand-in for a trained expert: the optimal predictor of its
/// objective for a fixed sub-mixture. A condition label restricts the
/// sub-mixture to the components carrying that label.
#[derive(Debug, Clone)]
pub struct OracleExpert {
    oracle: MixtureOracle,
    objective: Objective,
}

impl OracleExpert {
    /// ε-predictor under `schedule`.
    pub fn epsilon(oracle: &MixtureOracle, schedule: Schedule) -> Self {
        Self { oracle: oracle.with_schedule(schedule), objective: Objective::Epsilon }
    }

    /// Linear-path velocity predictor.
    pub fn velocity(oracle: &MixtureOracle) -> Self {
        Self { oracle: oracle.with_schedule(Schedule::Linear), objective: Objective::Velocity }
    }

    fn target(&self, cond: Option<usize>) -> Result<std::borrow::Cow<'_, MixtureOracle>> {
        match cond {
            Some(c) if self.oracle.conditions.contains(&c) => Ok(std::borrow::Cow::Owned(self.oracle.conditional(c)?)),
            _ => Ok(std::borrow::Cow::Borrowed(&self.oracle)),
        }
    }
}

impl Denoiser for OracleExpert {
    fn objective(&self) -> Objective {
        self.objective
    }

    fn schedule(&self) -> &Schedule {
        &self.oracle.schedule
    }

    fn data_dim(&self) -> usize {
        self.oracle.dim
    }

    fn predict(&self, x: &[f64], t: f64, cond: Option<usize>) -> Result<Vec<f64>> {
        let o = self.target(cond)?;
        let t = t.clamp(1e-9, 1.0 - 1e-9);
        match self.objective {
            Objective::Epsilon => o.marginal_eps(x, t),
            Objective::Velocity => o.decomposed_velocity(x, t),
        }
    }
}

/// Router whose logits are log posterior group masses of the full mixture.
#[derive(Debug, Clone)]
pub struct OracleRouter {
    oracle: MixtureOracle,
    groups: Vec<usize>,
    group_count: usize,
}

impl OracleRouter {
    pub fn new(oracle: &MixtureOracle, groups: Vec<usize>, group_count: usize) -> Result<Self> {
        if groups.len() != oracle.components() || groups.iter().any(|&g| g >= group_count) {
            return Err(Error::Shape("group map does not match the mixture".into()));
        }
        Ok(Self { oracle: oracle.with_schedule(Schedule::Linear), groups, group_count })
    }
}

impl Router for OracleRouter {
    fn num_experts(&self) -> usize {
        self.group_count
    }

    fn logits(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let p = self.oracle.group_posterior(x, t, &self.groups, self.group_count)?;
        Ok(p.iter().map(|v| v.max(1e-300).ln()).collect())
    }
}
