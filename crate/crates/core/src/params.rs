//! Named, ordered parameter collections and their initializers.

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TccError};

/// An ordered list of named trainable tensors.
///
/// Order is insertion order and is what checkpoints and the optimizer rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Tensor {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        let t = var.as_tensor().clone();
        self.entries.push((name, var));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `(name, tensor)` pairs. Every name must be present.
    pub fn load_from(&self, values: &[(String, Tensor)]) -> Result<()> {
        for (name, var) in &self.entries {
            let (_, t) = values
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| TccError::Config(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(TccError::shape(
                    "load parameters",
                    format!("{name}: expected {:?}, got {:?}", var.dims(), t.dims()),
                ));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Snapshot of the current values (detached copies).
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

/// Random initializers drawing from a caller-owned stream.
pub struct Initializer<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: &'a Device,
}

impl Initializer<'_> {
    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Var> {
        Ok(Var::zeros(shape, self.dtype, self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Var> {
        Ok(Var::ones(shape, self.dtype, self.device)?)
    }

    /// Normal with std `sqrt(2 / fan_in)`.
    pub fn fan_in_normal(&mut self, shape: &[usize], fan_in: usize) -> Result<Var> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        self.tensor(data, shape)
    }

    /// Normal with the given std, resampled outside two standard deviations.
    pub fn truncated_normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = normal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.tensor(data, shape)
    }
}
