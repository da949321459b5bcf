//! Named parameter tensors.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<usize> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "tensor '{name}' has shape {shape:?} but {} values",
                data.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name '{name}'")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.tensors.push(Tensor { name, shape, data });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub(crate) fn data(&self, id: usize) -> &[f32] {
        &self.tensors[id].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian data of the selected tensors.
    pub fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| keep(&t.name)) {
            h.update(t.name.as_bytes());
            for &s in &t.shape {
                h.update((s as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }
}

/// Gradients aligned with a [`ParameterStore`] by tensor index.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Gradients {
            grads: store.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// Truncated normal (cut at two standard deviations).
pub(crate) fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as f32;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", vec![2], vec![0.0, 1.0]).unwrap();
        assert!(s.insert("a", vec![1], vec![0.0]).is_err());
        assert!(s.insert("b", vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = truncated_normal(&mut rng, 10_000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-7));
    }
}
