//! Adam with a warmup-cosine learning-rate schedule.
//!
//! State lives outside the model: the optimizer is registered against a
//! list of parameter lengths and steps a matching list of `(param, grad)`
//! pairs. Updates are elementwise and sequential, so identical inputs give
//! bitwise-identical parameters on every run.

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Linear warmup to `max_lr`, then cosine decay to `min_lr`.
///
/// * step 0 (with warmup) -> lr 0
/// * midpoint of the cosine -> `(max_lr + min_lr) / 2`
/// * `step >= total_steps` -> `min_lr`
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate at `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps || self.total_steps <= self.warmup_steps {
            return self.min_lr;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam configuration; defaults are the standard (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }
}

/// Adam state: first/second moment per parameter tensor.
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Allocate moments for parameters of the given lengths.
    pub fn new(cfg: AdamConfig, param_lens: &[usize]) -> Self {
        Adam {
            m: param_lens.iter().map(|&l| vec![T::ZERO; l]).collect(),
            v: param_lens.iter().map(|&l| vec![T::ZERO; l]).collect(),
            cfg,
        }
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.cfg.schedule
    }

    /// One update over `(param, grad)` pairs at `step` (0-based).
    ///
    /// # Errors
    /// * contract error if the pair count differs from registration;
    /// * shape error if any length differs from registration;
    /// * non-finite error if any gradient element is NaN/Inf — parameters
    ///   are left untouched in that case.
    pub fn step(&mut self, params: &mut [(&mut [T], &[T])], step: usize) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer registered {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape {
                    op: "adam.step",
                    left: vec![self.m[i].len()],
                    right: vec![p.len(), g.len()],
                });
            }
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of tensor {i} contains NaN/Inf at step {step}"
                )));
            }
        }
        let lr = T::from_f64(self.cfg.schedule.lr(step));
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::ONE;
        // bias corrections use the 1-based step count
        let t = (step + 1) as i32;
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        for (i, (p, g)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
