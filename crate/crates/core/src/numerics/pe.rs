//! Sinusoidal positional embeddings of normalized coordinates.

use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 10_000.0;

/// Unchecked embedding: entry `2i` is `sin(c·2π / T^(2i/dim))`, entry
/// `2i+1` the matching cosine.
pub(crate) fn sinusoidal_raw(coord: f64, dim: usize, temperature: f64) -> impl Iterator<Item = f64> {
    (0..dim / 2).flat_map(move |i| {
        let arg = coord * 2.0 * PI / temperature.powf(2.0 * i as f64 / dim as f64);
        [arg.sin(), arg.cos()]
    })
}

pub fn sinusoidal_pe(coord: f64, dim: usize, temperature: f64) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Dim(format!("embedding dim must be even and positive, got {dim}")));
    }
    if !(0.0..=1.0).contains(&coord) {
        return Err(Error::Domain(format!("coordinate {coord} outside [0, 1]")));
    }
    if temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    Ok(Tensor::vector(sinusoidal_raw(coord, dim, temperature).collect()))
}

/// 2-D point embedding: `y` then `x`, each at `dim / 2`.
pub fn sinusoidal_pe_2d(cx: f64, cy: f64, dim: usize, temperature: f64) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Dim(format!("2-D embedding dim must be a multiple of 4, got {dim}")));
    }
    let mut data = sinusoidal_pe(cy, dim / 2, temperature)?.into_data();
    data.extend(sinusoidal_pe(cx, dim / 2, temperature)?.into_data());
    Ok(Tensor::vector(data))
}

/// Normalized center of grid index `i` out of `n`.
pub fn cell_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// `(h·w) × dim` table of 2-D embeddings at every cell center, row-major.
pub fn grid_pe(h: usize, w: usize, dim: usize, temperature: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * dim);
    for i in 0..h {
        for j in 0..w {
            data.extend(sinusoidal_pe_2d(cell_center(j, w), cell_center(i, h), dim, temperature)?.into_data());
        }
    }
    Tensor::new(&[h * w, dim], data)
}

/// `n × dim` table of 1-D embeddings at the `n` cell centers of one axis.
pub fn axis_pe(n: usize, dim: usize, temperature: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend(sinusoidal_pe(cell_center(i, n), dim, temperature)?.into_data());
    }
    Tensor::new(&[n, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coordinate_alternates_zero_one() {
        let pe = sinusoidal_pe(0.0, 4, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(pe.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn half_coordinate_is_half_period() {
        let pe = sinusoidal_pe(0.5, 2, DEFAULT_TEMPERATURE).unwrap();
        assert!(pe.data()[0].abs() < 1e-12);
        assert!((pe.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_evaluation() {
        let (c, dim, t) = (0.37, 128, DEFAULT_TEMPERATURE);
        let pe = sinusoidal_pe(c, dim, t).unwrap();
        for k in 0..dim {
            let i = (k / 2) as f64;
            let arg = c * 2.0 * PI / t.powf(2.0 * i / dim as f64);
            let want = if k % 2 == 0 { arg.sin() } else { arg.cos() };
            assert!((pe.data()[k] - want).abs() < 1e-15, "entry {k}");
        }
    }

    #[test]
    fn zero_norm_depends_only_on_dim() {
        for dim in [2, 8, 64] {
            let pe = sinusoidal_pe(0.0, dim, DEFAULT_TEMPERATURE).unwrap();
            let norm = pe.dot(&pe).unwrap().sqrt();
            assert!((norm - (dim as f64 / 2.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_odd_dim_and_out_of_range() {
        assert!(matches!(sinusoidal_pe(0.1, 3, 1e4), Err(Error::Dim(_))));
        assert!(matches!(sinusoidal_pe(1.5, 4, 1e4), Err(Error::Domain(_))));
        assert!(matches!(sinusoidal_pe(-0.1, 4, 1e4), Err(Error::Domain(_))));
    }

    #[test]
    fn two_d_puts_y_first() {
        let pe = sinusoidal_pe_2d(0.2, 0.7, 8, 1e4).unwrap();
        let y = sinusoidal_pe(0.7, 4, 1e4).unwrap();
        let x = sinusoidal_pe(0.2, 4, 1e4).unwrap();
        assert_eq!(&pe.data()[..4], y.data());
        assert_eq!(&pe.data()[4..], x.data());
    }

    proptest::proptest! {
        #[test]
        fn entries_bounded(c in 0.0f64..=1.0, half in 1usize..64) {
            let pe = sinusoidal_pe(c, half * 2, DEFAULT_TEMPERATURE).unwrap();
            proptest::prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
