use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::schedule::OptimConfig;
use crate::error::{Error, Result};

/// Adam with bias correction over an ordered list of named parameters.
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: Option<f64>,
    step: u64,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: &OptimConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|(_, p)| p.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip: cfg.grad_clip,
            step: 0,
            params,
            m,
            v,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let scale = match self.clip {
            Some(max) => {
                let mut sq = 0.0;
                for (_, p) in &self.params {
                    if let Some(g) = grads.get(p.as_tensor()) {
                        sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            p.set(&(p.as_tensor() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn export(&self, out: &mut BTreeMap<String, Tensor>) -> Result<u64> {
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adam.m.{name}"), self.m[i].copy()?);
            out.insert(format!("adam.v.{name}"), self.v[i].copy()?);
        }
        Ok(self.step)
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (slot, key) in [(0, format!("adam.m.{name}")), (1, format!("adam.v.{name}"))] {
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Shape(format!("optimizer state lacks {key}")))?;
                if t.dims() != p.dims() {
                    return Err(Error::Shape(format!("optimizer state {key} has the wrong shape")));
                }
                if slot == 0 {
                    self.m[i] = t.copy()?;
                } else {
                    self.v[i] = t.copy()?;
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Named parameters of several stores, each name prefixed by its group.
pub fn collect_params<'a>(groups: impl IntoIterator<Item = (&'a str, &'a crate::model::ParamStore)>) -> Vec<(String, Var)> {
    groups
        .into_iter()
        .flat_map(|(prefix, store)| {
            store
                .vars()
                .map(move |(n, v)| (format!("{prefix}{n}"), v.clone()))
        })
        .collect()
}
