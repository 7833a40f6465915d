//! Dense tensors, reverse-mode gradients, layers and positional embeddings.

pub mod autograd;
pub mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pe;
pub mod rng;
pub mod tensor;

pub use autograd::{Axis, Gradients, Tape, Var};
pub use nn::{Ffn, LayerNorm, Linear};
pub use params::{GradRecord, Init, ParamId, ParamStore};
pub use tensor::Tensor;

/// Clamp for [`inverse_sigmoid`].
pub const INV_SIGMOID_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(x / (1 - x))` after clamping `x` to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
    (x / (1.0 - x)).ln()
}

pub fn inverse_sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(inverse_sigmoid)
}

pub fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_sigmoid_values() {
        assert_eq!(inverse_sigmoid(0.5), 0.0);
        assert!((inverse_sigmoid(0.9) - 9f64.ln()).abs() < 1e-12);
        assert!((inverse_sigmoid(0.9) - 2.1972246).abs() < 1e-7);
        assert!((sigmoid(inverse_sigmoid(0.25)) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn inverse_sigmoid_clamps_edges() {
        assert!(inverse_sigmoid(0.0).is_finite());
        assert!(inverse_sigmoid(1.0).is_finite());
        assert_eq!(inverse_sigmoid(0.0), inverse_sigmoid(INV_SIGMOID_EPS));
    }

    proptest::proptest! {
        #[test]
        fn sigmoid_round_trip(x in 0.01f64..=0.99) {
            proptest::prop_assert!((sigmoid(inverse_sigmoid(x)) - x).abs() < 1e-9);
        }
    }
}
