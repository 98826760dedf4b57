use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Module, Tensor, VisitorMut};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled: applied to the parameter directly, not through the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimiser settings {self:?}")));
        }
        Ok(())
    }
}

/// Adaptive-moment optimiser with decoupled weight decay. Moments are keyed
/// by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: HashMap::new() }
    }

    /// Applies one update from the gradients currently stored on `model`'s
    /// parameters. Parameters without a gradient only decay.
    pub fn step(&mut self, model: &mut dyn Module) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        struct Update<'a> {
            opt: &'a mut Adam,
            bc: (f64, f64),
            err: Option<Error>,
        }
        impl VisitorMut for Update<'_> {
            fn param(&mut self, name: &str, t: &mut Tensor) {
                if self.err.is_some() {
                    return;
                }
                let c = self.opt.cfg;
                let n = t.numel();
                let grad = t.grad().unwrap_or_else(|| vec![0.0; n]);
                let (m, v) = self
                    .opt
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let mut data = t.to_vec();
                for i in 0..n {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                    let mh = m[i] / self.bc.0;
                    let vh = v[i] / self.bc.1;
                    data[i] -= c.lr * (mh / (vh.sqrt() + c.epsilon) + c.weight_decay * data[i]);
                }
                match t.with_data(data) {
                    Ok(nt) => *t = nt,
                    Err(e) => self.err = Some(e),
                }
            }
        }
        let mut u = Update { opt: self, bc: (bc1, bc2), err: None };
        model.visit_mut("", &mut u);
        match u.err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
