//! Named, deterministically initialized trainable parameters.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::NetError;

/// Ordered name → variable map. Initialization draws from a ChaCha stream in
/// registration order, so the same seed and architecture give identical weights.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Uniform(-bound, bound) initialized parameter.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor, NetError> {
        if self.vars.contains_key(name) {
            return Err(NetError::Config(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-1.0..1.0) * bound).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor, NetError> {
        self.uniform(name, shape, 0.0)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; shape must match exactly.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<(), NetError> {
        let var = self.vars.get(name).ok_or_else(|| NetError::UnknownParameter(name.to_string()))?;
        if var.dims() != value.dims() {
            return Err(NetError::ShapeMismatch(format!(
                "{name}: parameter {:?} vs value {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat f64 copy of a parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>, NetError> {
        let var = self.vars.get(name).ok_or_else(|| NetError::UnknownParameter(name.to_string()))?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Sets one scalar element of a parameter.
    pub fn set_element(&self, name: &str, index: usize, value: f64) -> Result<(), NetError> {
        let var = self.vars.get(name).ok_or_else(|| NetError::UnknownParameter(name.to_string()))?;
        let mut flat = self.values(name)?;
        flat[index] = value;
        let t = Tensor::from_vec(flat, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}
