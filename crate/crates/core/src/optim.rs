//! Adam with coupled L2 weight decay, restricted to decayable parameters.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "optimizer.{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config(
                "optimizer.weight_decay must be >= 0 and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter() {
            if !p.kind.trainable() {
                continue;
            }
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let theta = p.var.as_tensor();
            let g = if p.kind.decayed() && c.weight_decay > 0.0 {
                (g + theta.affine(c.weight_decay, 0.0)?)?
            } else {
                g.clone()
            };
            let m = match self.first.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + c.eps)?)?;
            p.var.set(&theta.sub(&(update * c.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` and `v.<param>`.
    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (n, t) in &self.first {
            out.insert(format!("m.{n}"), t.clone());
        }
        for (n, t) in &self.second {
            out.insert(format!("v.{n}"), t.clone());
        }
        out
    }

    pub fn from_tensors(config: AdamConfig, step: u64, tensors: HashMap<String, Tensor>) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("m.") {
                first.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v.") {
                second.insert(n.to_string(), t);
            }
        }
        Self {
            config,
            step,
            first,
            second,
        }
    }
}
