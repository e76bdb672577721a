use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order so hashing, serialization
/// and optimizer state are all order-stable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: impl Into<Shape>) -> Result<()> {
        let var = Var::from_vec(data, shape, &Device::Cpu)?;
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, data, shape.to_vec())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| rng.sample(dist)).collect();
        self.insert(name, data, shape.to_vec())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape.to_vec())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(Var::as_tensor)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies keyed by `prefix + name`.
    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            out.insert(format!("{prefix}{name}"), var.as_tensor().detach().copy()?);
        }
        Ok(())
    }

    /// Overwrites every parameter from `tensors[prefix + name]`; shapes must match.
    pub fn import(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "{key}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F64)?)?;
        }
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn duplicate(&self) -> Result<Self> {
        let mut out = ParamStore::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor().detach().copy()?;
            out.vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and the exact f64 bit patterns.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
