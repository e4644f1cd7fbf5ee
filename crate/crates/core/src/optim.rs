//! Adaptive-moment optimizer with a multiplicative per-epoch learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.999,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    steps: u64,
    epochs: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let zeros = |ps: &ParamSet| {
            let mut out = ParamSet::new();
            for (name, t) in ps.iter() {
                out.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            out
        };
        Ok(Adam {
            config,
            m: zeros(params),
            v: zeros(params),
            steps: 0,
            epochs: 0,
        })
    }

    /// Learning rate after the completed epochs: `lr · lr_decay^epochs`.
    pub fn lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powi(self.epochs as i32)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn end_epoch(&mut self) {
        self.epochs += 1;
    }

    /// One descent step on `params` along the loss gradients `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("gradient set does not match the parameters"));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let lr = self.lr();
        for (name, p) in params.iter_mut() {
            let g = grads.require(name)?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for `{name}`")))?;
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let v = self.v.get_mut(name).expect("moments share names");
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
