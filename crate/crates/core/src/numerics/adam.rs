use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning rate as a function of the step counter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Linear interpolation from `start` to `end` over `steps`, then held at `end`.
    Linear { start: f64, end: f64, steps: u64 },
}

impl LrSchedule {
    /// Rate used for step `t` (1-based).
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Linear { start, end, steps } => {
                if steps <= 1 {
                    return start;
                }
                let frac = ((t.saturating_sub(1)) as f64 / (steps - 1) as f64).min(1.0);
                start + (end - start) * frac
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    schedule: LrSchedule,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, cfg: AdamConfig, schedule: LrSchedule) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            schedule,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.t + 1)
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    /// One update. Parameters with no gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim("adam_step", &[self.m.len()], &[params.len()]));
        }
        for (id, g) in grads.iter() {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::dim("adam_step", params.get(id).shape(), g.shape()));
                }
            }
        }
        self.t += 1;
        let lr = self.schedule.at(self.t);
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |t| t.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
