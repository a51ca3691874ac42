//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store with seeded initialization, the layers the models share, the
//! optimizer and the checkpoint format.

pub mod checkpoint;
pub mod fused;
pub mod layers;
pub mod optim;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MbevError, Result};

pub use layers::{Attention, LayerNorm, Linear, Mlp};

/// Named trainable tensors. Names are dot-separated paths such as
/// `encoder.block0.mlp.fc1.w`; the first segment is the component group.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(MbevError::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn zeros(&mut self, name: &str, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        let n = shape.elem_count();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, name: &str, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        let n = shape.elem_count();
        self.insert(name, shape, vec![1.0; n])
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        shape: impl Into<Shape>,
        std: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = shape.into();
        let dist = Normal::new(0.0, std).map_err(|e| MbevError::InvalidConfig(e.to_string()))?;
        let values = (0..shape.elem_count()).map(|_| dist.sample(rng)).collect();
        self.insert(name, shape, values)
    }

    /// Xavier-uniform `(fan_in, fan_out)` matrix.
    pub fn xavier<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Var> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Shape::from((fan_in, fan_out)), values)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| MbevError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Overwrites every parameter in `self` with the same-named tensor of `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other.get(name)?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Parameter tensor, detached from the graph when `track` is false.
pub fn param(var: &Var, track: bool) -> Tensor {
    if track {
        var.as_tensor().clone()
    } else {
        var.as_tensor().detach()
    }
}
