use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{BlockData, NamedBlock};
use crate::error::{Error, Result};

/// Named trainable tensors of one model.
///
/// Initialization draws from an explicit seeded generator so that a model
/// is a pure function of its architecture and seed.
pub struct ParamStore {
    dtype: DType,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn add(&mut self, name: String, dims: &[usize], values: Vec<f64>) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    pub fn uniform(
        &mut self,
        name: String,
        dims: &[usize],
        bound: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let n = dims.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound) as f64).collect();
        self.add(name, dims, values)
    }

    pub fn constant(&mut self, name: String, dims: &[usize], value: f64) -> Result<Var> {
        let n = dims.iter().product();
        self.add(name, dims, vec![value; n])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_blocks(&self) -> Result<Vec<NamedBlock>> {
        self.entries
            .iter()
            .map(|(name, var)| NamedBlock::from_tensor(name, var.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from blocks with matching names and dims.
    pub fn load_blocks(&self, blocks: &[NamedBlock]) -> Result<()> {
        for (name, var) in &self.entries {
            let block = blocks
                .iter()
                .find(|b| b.name == *name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter block {name}")))?;
            if block.dims != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has dims {:?} in checkpoint, model expects {:?}",
                    block.dims,
                    var.dims()
                )));
            }
            let t = match &block.data {
                BlockData::F32(v) => Tensor::from_slice(v, var.dims(), &Device::Cpu)?,
                BlockData::F64(v) => Tensor::from_slice(v, var.dims(), &Device::Cpu)?,
            };
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Flattened copy of all parameters, in registration order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, v) in &self.entries {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}
