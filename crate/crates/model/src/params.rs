//! Named parameter storage with seeded initialization and flat f32 export.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One exported parameter: name, shape and row-major f32 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Ordered collection of trainable variables. Order is insertion order and
/// is what checkpoints and optimizer state rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    /// Zero-mean Gaussian values with the given standard deviation.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * std) as f32
            })
            .collect();
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::from_vec(vec![value; n], shape, &Device::Cpu)?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<Vec<TensorRecord>> {
        self.entries
            .iter()
            .map(|(name, var)| {
                Ok(TensorRecord {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.as_tensor().flatten_all()?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `records`, which must match names and
    /// shapes one to one.
    pub fn import(&self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                records.len()
            )));
        }
        for ((name, var), rec) in self.entries.iter().zip(records) {
            if *name != rec.name || var.dims() != rec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter mismatch: have {name} {:?}, got {} {:?}",
                    var.dims(),
                    rec.name,
                    rec.shape
                )));
            }
            var.set(&Tensor::from_slice(&rec.data, rec.shape.as_slice(), &Device::Cpu)?)?;
        }
        Ok(())
    }
}

/// He-normal standard deviation for a convolution with `fan_in` inputs.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
