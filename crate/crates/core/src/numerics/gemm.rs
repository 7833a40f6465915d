//! Thin wrapper over `matrixmultiply` for both float widths.
//!
//! `a` is `m × k` (stored `k × m` when `ta`), `b` is `k × n` (stored `n × k`
//! when `tb`), and `c` is `m × n`. With `acc` the product is added to `c`.

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    /// Branch-free `exp` for arguments in `(-∞, 0]`, as found in a
    /// max-shifted softmax; relative error below `1e-6` (f32) / `1e-13` (f64).
    fn exp_nonpositive(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, other: Self) -> Self;
    /// `c ← a·b (+ c)` over strided views; slices must cover the addressed extent.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, c: &mut [Self], sc: Strides, acc: bool);
}

/// Row and column strides of a matrix view into a flat slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    pub fn col_major(rows: usize) -> Self {
        Self { row: 1, col: rows }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row + (cols - 1) * self.col + 1
    }
}

/// Rounds to nearest by the add-and-subtract-magic trick, which vectorizes
/// on baseline x86-64 where `round` does not.
const ROUND_F32: f32 = 12_582_912.0; // 1.5 · 2^23
const ROUND_F64: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52

fn exp_nonpositive_f32(x: f32) -> f32 {
    let x = x.max(-87.0);
    let y = x * std::f32::consts::LOG2_E + ROUND_F32;
    let n = y - ROUND_F32;
    // Two-part ln 2 keeps the reduction exact.
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // The low mantissa bits of `y` hold `n`; integer ops avoid a saturating cast.
    let e = y.to_bits().wrapping_sub(ROUND_F32.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(e)
}

fn exp_nonpositive_f64(x: f64) -> f64 {
    let x = x.max(-708.0);
    let y = x * std::f64::consts::LOG2_E + ROUND_F64;
    let n = y - ROUND_F64;
    let r = x - n * 0.693_147_180_369_123_8 - n * 1.908_214_929_270_587_7e-10;
    let mut p = 1.0 / 479_001_600.0;
    for c in [39_916_800.0, 3_628_800.0, 362_880.0, 40_320.0, 5040.0, 720.0, 120.0, 24.0, 6.0, 2.0, 1.0, 1.0] {
        p = p * r + 1.0 / c;
    }
    let e = y.to_bits().wrapping_sub(ROUND_F64.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(e)
}

macro_rules! impl_real {
    ($t:ty, $f:path, $exp:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn exp_nonpositive(self) -> Self {
                $exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                c: &mut [Self],
                sc: Strides,
                acc: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= sc.extent(m, n), "gemm out size");
                if k == 0 {
                    if !acc {
                        for i in 0..m {
                            for j in 0..n {
                                c[i * sc.row + j * sc.col] = 0.0;
                            }
                        }
                    }
                    return;
                }
                assert!(a.len() >= sa.extent(m, k), "gemm lhs size");
                assert!(b.len() >= sb.extent(k, n), "gemm rhs size");
                let beta = if acc { 1.0 } else { 0.0 };
                // SAFETY: the asserted extents cover every element addressed by
                // the (m, k, n) shape under the given strides.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.row as isize,
                        sa.col as isize,
                        b.as_ptr(),
                        sb.row as isize,
                        sb.col as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.row as isize,
                        sc.col as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm, exp_nonpositive_f64);
impl_real!(f32, matrixmultiply::sgemm, exp_nonpositive_f32);

#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Real>(m: usize, k: usize, n: usize, a: &[T], sa: Strides, b: &[T], sb: Strides, c: &mut [T], sc: Strides, acc: bool) {
    T::gemm_strided(m, k, n, a, sa, b, sb, c, sc, acc)
}

#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], acc: bool) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm out size");
    let sa = if ta { Strides::col_major(m) } else { Strides::row_major(k) };
    let sb = if tb { Strides::col_major(k) } else { Strides::row_major(n) };
    T::gemm_strided(m, k, n, a, sa, b, sb, c, Strides::row_major(n), acc)
}
