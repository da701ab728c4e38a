//! Gradient buffers, Adam with global-norm clipping, and EMA shadow weights.

use crate::error::Result;

use super::layout::Layout;

/// Per-parameter gradient buffer matching a network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub grads: Vec<f64>,
}

impl GradientTape {
    pub fn zeros(len: usize) -> Self {
        Self { grads: vec![0.0; len] }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn norm(&self) -> f64 {
        global_norm(&self.grads)
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| *g == 0.0)
    }

    pub fn check_finite(&self, layout: &Layout) -> Result<()> {
        layout.check_finite(&self.grads)
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| *g *= s);
    }
}

pub fn global_norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so that its global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW). Zero for experts.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to `clip_norm` (when given) and applies one bias-corrected
    /// Adam update. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64], lr: f64, clip_norm: Option<f64>) -> f64 {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let norm = match clip_norm {
            Some(c) => clip_global_norm(grads, c),
            None => global_norm(grads),
        };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if weight_decay != 0.0 {
                params[i] -= lr * weight_decay * params[i];
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        norm
    }
}

/// `ema ← μ·ema + (1 − μ)·θ`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    assert_eq!(ema.len(), params.len());
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(3, AdamConfig::default());
        let mut p = vec![0.5, -1.0, 2.0];
        let mut g = vec![0.0; 3];
        adam.step(&mut p, &mut g, 1e-3, Some(1.0));
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias correction gives m̂ = v̂ = 1, so
        // w = 0 − 1e-3 · 1 / (1 + 1e-8).
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut w = vec![0.0];
        adam.step(&mut w, &mut [1.0], 1e-3, None);
        assert!((w[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![6.0, 8.0];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(1, cfg);
        let mut w = vec![2.0];
        adam.step(&mut w, &mut [0.0], 0.5, None);
        assert!((w[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn ema_examples() {
        let mut ema = vec![0.0];
        ema_update(&mut ema, &[1.0], 0.9);
        ema_update(&mut ema, &[1.0], 0.9);
        assert!((ema[0] - 0.19).abs() < 1e-15);

        let mut ema = vec![3.0];
        for _ in 0..100 {
            ema_update(&mut ema, &[3.0], 0.9999);
        }
        assert_eq!(ema[0], 3.0);

        let mut ema = vec![-4.0];
        ema_update(&mut ema, &[1.25], 0.0);
        assert_eq!(ema[0], 1.25);
    }

    #[test]
    fn ema_matches_closed_form() {
        let (mu, theta, e0) = (0.97, 0.8, -1.5);
        let mut ema = vec![e0];
        for n in 1..=500 {
            ema_update(&mut ema, &[theta], mu);
            let expected = mu.powi(n) * e0 + (1.0 - mu.powi(n)) * theta;
            assert!((ema[0] - expected).abs() < 1e-10);
        }
    }
}
