//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "optimizer.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optimizer.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("optimizer.eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    /// Zero-initialized moments shaped like `params`.
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its stored gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters but {} were given",
                self.first.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            if params.tensor(i).grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter {} has no gradient",
                    params.name(i)
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let lr_wd = lr * weight_decay;
        for i in 0..params.len() {
            let (data, grad) = params.tensor_mut(i).data_mut_and_grad();
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), m), v) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr_wd * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments and step counter packed as named tensors for checkpointing.
    pub fn state(&self, params: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        out.insert("adamw.step", Tensor::scalar(self.step as f64))?;
        for (i, (name, t)) in params.iter().enumerate() {
            let shape = t.shape().to_vec();
            out.insert(format!("adamw.m.{name}"), Tensor::new(shape.clone(), self.first[i].clone())?)?;
            out.insert(format!("adamw.v.{name}"), Tensor::new(shape, self.second[i].clone())?)?;
        }
        Ok(out)
    }

    pub fn from_state(config: AdamWConfig, params: &ParamSet, state: &ParamSet) -> Result<Self> {
        let missing = |what: String| Error::Version(format!("optimizer state lacks {what}"));
        let step = state
            .get("adamw.step")
            .ok_or_else(|| missing("adamw.step".into()))?
            .item() as u64;
        let mut first = Vec::with_capacity(params.len());
        let mut second = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            for (prefix, dst) in [("m", &mut first), ("v", &mut second)] {
                let key = format!("adamw.{prefix}.{name}");
                let s = state.get(&key).ok_or_else(|| missing(key.clone()))?;
                if s.shape() != t.shape() {
                    return Err(Error::Version(format!("{key} has shape {:?}", s.shape())));
                }
                dst.push(s.data().to_vec());
            }
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }
}
