//! Adam and learning-rate schedules.

use crate::math::{cos, sqrt};
use crate::params::{Grads, ParamId, ParamStore};
use crate::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Half-cosine decay from `lr` to zero over `total` steps.
    Cosine { lr: f64, total: u64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, total } => {
                if total == 0 {
                    return lr;
                }
                let t = (step.min(total)) as f64 / total as f64;
                0.5 * lr * (1.0 + cos(core::f64::consts::PI * t))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `ids` using `grads` at rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &Grads, lr: f64) -> Result<()> {
        for id in ids {
            let Some(g) = grads.get(id) else {
                return Err(Error::MissingGrad {
                    name: store.name(*id).to_string(),
                });
            };
            if g.len() != store.get(*id).numel() {
                return Err(Error::shape("adam_step", &[store.get(*id).shape(), &[g.len()]]));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for id in ids {
            let g = &grads[id];
            let p = store.get_mut(*id).data_mut();
            let mom = self.moments.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                p[i] -= lr * mhat / (sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}
