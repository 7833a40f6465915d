//! AdamW with decoupled weight decay and per-parameter learning rates.

use crate::numerics::{GradRecord, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, weight_decay }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update. `lr_of(name)` gives each parameter's learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[GradRecord], lr_of: impl Fn(&str) -> f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for g in grads {
            let i = g.param.index();
            let lr = lr_of(store.name(g.param));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = store.get_mut(g.param).data_mut();
            for (k, &gk) in g.grad.data().iter().enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
                theta[k] -= lr * (update + self.weight_decay * theta[k]);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [GradRecord], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.grad.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.grad.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}
