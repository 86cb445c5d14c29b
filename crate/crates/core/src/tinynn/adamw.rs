use serde::{Deserialize, Serialize};

use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are allocated lazily on
/// the first step and must line up with the parameter slices afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<(), NnError> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit (scheduled) learning rate.
    pub fn step_with_lr(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::shape(format!("{} gradient buffers", params.len()), grads.len()));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(NnError::shape(format!("{} parameter buffers", self.first_moment.len()), params.len()));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first_moment) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(NnError::shape(p.len(), g.len().min(m.len())));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first_moment).zip(&mut self.second_moment) {
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_keeps_params() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut p = vec![1.5, -2.0];
        for _ in 0..10 {
            opt.step(vec![&mut p], vec![&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 });
        let mut p = vec![3.0];
        opt.step(vec![&mut p], vec![&[1.0]]).unwrap();
        // m̂ = v̂ = 1 after bias correction: Δ = 0.1 / (1 + 1e-8)
        assert!((p[0] - (3.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let center = [1.0, -2.0, 0.5];
        let mut p = vec![0.0; 3];
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() });
        let loss = |p: &[f64]| p.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&center).map(|(a, c)| 2.0 * (a - c)).collect();
            opt.step(vec![&mut p], vec![&g]).unwrap();
        }
        assert!(loss(&p) < 1e-6, "loss {}", loss(&p));
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![0.0; 2];
        assert!(opt.step(vec![&mut p], vec![&[1.0]]).is_err());
    }
}
