use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensors, initialized from a seeded stream in
/// construction order.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: SeededRng,
}

/// Raw parameter block as persisted in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: seeded(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidConfig(format!("parameter {name} declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_blocks(&self) -> Result<Vec<ParamBlock>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(ParamBlock {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    data: v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter; the block set must match exactly.
    pub fn load_blocks(&mut self, blocks: &[ParamBlock]) -> Result<()> {
        if blocks.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter blocks, model expects {}",
                blocks.len(),
                self.vars.len()
            )));
        }
        for b in blocks {
            let var = self
                .vars
                .get(&b.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", b.name)))?;
            if var.dims() != b.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    b.name,
                    b.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(b.data.clone(), b.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Reads one scalar entry (as f64).
    pub fn scalar(&self, name: &str, index: usize) -> Result<f64> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no parameter {name}")))?;
        Ok(v.flatten_all()?
            .to_dtype(DType::F64)?
            .get(index)?
            .to_scalar::<f64>()?)
    }

    /// Overwrites one scalar entry.
    pub fn set_scalar(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Argument(format!("no parameter {name}")))?;
        let mut data = v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        data[index] = value;
        let t = Tensor::from_vec(data, v.dims(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }
}
