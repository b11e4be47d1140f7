//! Named parameters, Adam, and binary checkpoints.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, ParamId>,
    steps: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("non-finite initial value for `{name}`")));
        }
        let id = ParamId(self.slots.len());
        let z = Tensor::zeros(value.dim());
        self.slots.push(Slot { name: name.to_string(), grad: z.clone(), m: z.clone(), v: z, value });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform Glorot initialization of a `rows × cols` weight.
    pub fn add_glorot<R: Rng + ?Sized>(&mut self, name: &str, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let w = Tensor::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros((rows, cols)))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.slots[id.0].grad += g;
    }

    pub fn zero_grad(&mut self) {
        self.slots.iter_mut().for_each(|s| s.grad.fill(0.0));
    }

    /// One Adam step on every parameter (minimizing), then clears gradients.
    pub fn adam_step(&mut self, opt: &Adam) {
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
        for s in &mut self.slots {
            ndarray::Zip::from(&mut s.value).and(&mut s.m).and(&mut s.v).and(&mut s.grad).for_each(|x, m, v, g| {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * *g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * *g * *g;
                *x -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.eps);
                *g = 0.0;
            });
        }
    }

    /// Writes `<path>.bin` (little-endian f64 values) and `<path>.json` (manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(8 * self.n_scalars());
        let mut entries = Vec::with_capacity(self.slots.len());
        let mut offset = 0;
        for s in &self.slots {
            entries.push(ManifestEntry { name: s.name.clone(), shape: s.value.shape().to_vec(), offset });
            for x in s.value.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            offset += s.value.len();
        }
        std::fs::write(path.with_extension("bin"), bytes)?;
        let manifest = Manifest { tensors: entries, total: offset };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrites values of existing parameters from a checkpoint written by [`Self::save`].
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let bytes = std::fs::read(path.with_extension("bin"))?;
        if bytes.len() != 8 * manifest.total {
            return Err(Error::Checkpoint(format!("expected {} values, found {} bytes", manifest.total, bytes.len())));
        }
        if manifest.tensors.len() != self.slots.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for e in manifest.tensors {
            let id = self.id(&e.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
            let slot = &mut self.slots[id.0];
            if slot.value.shape() != e.shape.as_slice() || e.offset + slot.value.len() > manifest.total {
                return Err(Error::Checkpoint(format!("shape mismatch for `{}`", e.name)));
            }
            for (k, x) in slot.value.iter_mut().enumerate() {
                let at = 8 * (e.offset + k);
                *x = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    total: usize,
}
