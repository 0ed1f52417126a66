//! SGD with momentum, L2-style weight decay, and
//! step / cosine learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::GradTable;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `gamma` every `size` steps.
    Step { size: usize, gamma: f64 },
    /// Half-cosine decay from the base rate to zero over `total` steps.
    Cosine { total: usize },
}

impl Schedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { size, gamma } => base * gamma.powi((step / size.max(1)) as i32),
            Schedule::Cosine { total } => {
                if total == 0 {
                    return 0.0;
                }
                let t = step.min(total) as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    base_lr: f64,
    momentum: f64,
    weight_decay: f64,
    schedule: Schedule,
    step: usize,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, schedule: Schedule) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        if let Schedule::Step { size: 0, .. } = schedule {
            return Err(Error::InvalidArgument("step schedule size must be > 0".into()));
        }
        Ok(OptimizerState {
            base_lr: lr,
            momentum,
            weight_decay,
            schedule,
            step: 0,
            buffers: BTreeMap::new(),
        })
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.base_lr, self.step)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update of every tensor in `params`:
    /// `g' = g + wd·θ`, `buf = μ·buf + g'`, `θ -= lr·buf`, then advance the schedule.
    pub fn sgd_step(&mut self, params: &mut ParamStore, grads: &GradTable) -> Result<()> {
        for name in params.names() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::State(format!("no gradient for trainable `{name}`")))?;
            if g.numel() != params.require(name)?.numel() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("gradient for `{name}` has {} entries", g.numel()),
                ));
            }
        }
        let lr = self.current_lr();
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let buf = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let first = self.step == 0;
            for ((w, &gi), b) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = gi + self.weight_decay * *w;
                *b = if self.momentum > 0.0 && !first {
                    self.momentum * *b + d
                } else {
                    d
                };
                *w -= lr * *b;
            }
        }
        self.step += 1;
        Ok(())
    }
}
