use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient, added to the gradient as `weight_decay · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i] == None` means parameter `i` received no
    /// gradient this step; it still decays when `weight_decay > 0`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::dim("adam_step", &[self.first.len()], &[params.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if self.first[i].len() != p.numel() || g.is_some_and(|g| g.len() != p.numel()) {
                return Err(Error::dim(
                    "adam_step",
                    p.shape(),
                    &[g.map_or(self.first[i].len(), <[f64]>::len)],
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.is_none() && c.weight_decay == 0.0 {
                continue;
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let grad = g.map_or(0.0, |g| g[j]) + c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad * grad;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
