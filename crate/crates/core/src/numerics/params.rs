use std::collections::HashMap;

use super::rng::XorShift64Star;
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient of one parameter; shape always equals the parameter's.
#[derive(Debug, Clone)]
pub struct GradRecord {
    pub param: ParamId,
    pub grad: Tensor,
}

/// Named, ordered parameter tensors. Insertion order is the canonical
/// order used by checkpoints and optimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Seeded initializers.
pub struct Init {
    rng: XorShift64Star,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: XorShift64Star::new(seed) }
    }

    pub fn rng(&mut self) -> &mut XorShift64Star {
        &mut self.rng
    }

    /// Xavier/Glorot uniform for an `out × in` weight.
    pub fn xavier(&mut self, out_dim: usize, in_dim: usize) -> Tensor {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        self.uniform(&[out_dim, in_dim], -bound, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform(lo, hi)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.normal() * std).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}
