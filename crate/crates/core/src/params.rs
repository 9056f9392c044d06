//! Named parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a stable
//! dot-separated path (`block0.nsa.w_q`, `head.w1`, ...). Model layouts hold
//! [`ParamId`] handles into the store; gradients come back as a `Vec<Tensor>`
//! aligned with the store's insertion order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<String>, tensor: Tensor) -> ParamId {
        let path = path.into();
        debug_assert!(
            self.entries.iter().all(|e| e.path != path),
            "duplicate parameter path {path}"
        );
        self.entries.push(ParamEntry { path, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.path == path).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect()
    }

    /// Concatenates every tensor in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copies values from `other`, which must have the same paths and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape("parameter stores differ in length".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.path != b.path || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} does not match {}",
                    a.path, b.path
                )));
            }
            a.tensor.data_mut().copy_from_slice(b.tensor.data());
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(1/fan_in)`.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub(crate) fn flatten_grads(grads: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grads.iter().map(Tensor::len).sum());
    for g in grads {
        out.extend_from_slice(g.data());
    }
    out
}
