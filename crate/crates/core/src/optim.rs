//! Adaptive-moment optimizer and learning-rate schedules.

use crate::error::{validation, Result};
use crate::math;
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to zero over the given number of steps.
    Cosine { total_steps: u64 },
}

impl Schedule {
    pub fn lr_at(self, base: f64, step: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine { total_steps } => {
                if total_steps == 0 || step >= total_steps {
                    return 0.0;
                }
                let frac = step as f64 / total_steps as f64;
                0.5 * base * (1.0 + math::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

/// Moment estimates. Both sets carry exactly the names of the trained
/// parameters; `t` counts applied steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(validation!("learning rate must be finite and non-negative, got {lr}"));
        }
        if !grads.all_finite() {
            return Err(validation!("non-finite gradient"));
        }
        self.t += 1;
        let b1t = 1.0 - pow(cfg.beta1, self.t);
        let b2t = 1.0 - pow(cfg.beta2, self.t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(validation!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()));
            }
            if !self.m.contains(name) {
                self.m.insert(name.as_str(), crate::Tensor::zeros(g.shape()));
                self.v.insert(name.as_str(), crate::Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *pv -= lr * mhat / (math::sqrt(vhat) + cfg.eps);
            }
        }
        Ok(())
    }
}

fn pow(base: f64, n: u64) -> f64 {
    libm::pow(base, n as f64)
}
