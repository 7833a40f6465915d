//! Elementary layers over the tape.

use super::autograd::{Tape, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), init.xavier(out_dim, in_dim));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        assert_eq!(tape.value(x).cols(), self.in_dim, "linear input width");
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul_nt(x, w);
        tape.add_row(y, b)
    }

    /// Sets the weight to the identity (square layers only) and the bias to zero.
    pub fn set_identity(&self, store: &mut ParamStore) {
        assert_eq!(self.in_dim, self.out_dim, "identity needs a square layer");
        *store.get_mut(self.weight) = Tensor::identity(self.in_dim);
        *store.get_mut(self.bias) = Tensor::zeros(&[self.out_dim]);
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        *store.get_mut(self.weight) = Tensor::zeros(&[self.out_dim, self.in_dim]);
        *store.get_mut(self.bias) = Tensor::zeros(&[self.out_dim]);
    }
}

/// Linear layers with ReLU between them and nothing after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ffn {
    pub layers: Vec<Linear>,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an ffn needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty ffn").out_dim
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Forward pass on a plain tensor (rows are independent inputs).
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_dim() {
            return Err(dim_err!("ffn expects width {}, got {}", self.in_dim(), x.cols()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.apply(&mut tape, store, xv);
        Ok(tape.value(y).clone())
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        self.layers.iter().for_each(|l| l.set_zero(store));
    }

    /// Identity requires square layers; ReLU between them is then the only
    /// nonlinearity, so inputs must be nonnegative for an exact identity
    /// unless the network has a single layer.
    pub fn set_identity(&self, store: &mut ParamStore) {
        self.layers.iter().for_each(|l| l.set_identity(store));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}
