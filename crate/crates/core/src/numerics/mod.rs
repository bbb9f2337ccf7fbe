//! Dense 2-D tensor arithmetic, elementary layers and reverse-mode gradients.
//!
//! Tensors are plain row-major [`ndarray::Array2`] values. Everything that
//! needs gradients is recorded on a [`Tape`] and differentiated with
//! [`value_and_grad`]; [`finite_diff_check`] is the independent oracle.

mod gradcheck;
mod layers;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

pub use gradcheck::{check_against, finite_diff_check, GradCheckReport};
pub use layers::{mlp_forward, LayerNorm, Linear, Mlp};
pub use params::{Init, Param, ParamStore};
pub use tape::{value_and_grad, Gradients, Segments, Tape, Var};

/// Row-major 2-D tensor.
pub type Tensor2<F> = Array2<F>;

/// Storage tag for serialized tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type: `f64` for gradient oracles, `f32` for training.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

#[inline]
pub(crate) fn c<F: Real>(v: f64) -> F {
    F::from_f64_lossy(v)
}

/// Converts a tensor between element types.
pub fn cast<A: Real, B: Real>(t: &Array2<A>) -> Array2<B> {
    t.mapv(|v| B::from_f64_lossy(v.as_f64()))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(t: &Array2<F>) -> Array2<F> {
    let mut out = t.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Variance floor below which [`zscore_normalize`] returns the zero vector.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Standardizes a vector to zero mean and unit population standard deviation.
pub fn zscore_normalize<F: Real>(v: ArrayView1<'_, F>) -> Array1<F> {
    let n = v.len();
    if n == 0 {
        return Array1::zeros(0);
    }
    let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
    let var = v
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if var < ZSCORE_EPS {
        return Array1::zeros(n);
    }
    let std = var.sqrt();
    v.mapv(|x| c((x.as_f64() - mean) / std))
}

/// Mean over the rows of a matrix.
pub fn mean_rows<F: Real>(t: &Array2<F>) -> Array1<F> {
    t.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(t.ncols()))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let x3 = x * x * x;
    let inner = c::<F>(GELU_K) * (x + c::<F>(GELU_A) * x3);
    c::<F>(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let x2 = x * x;
    let inner = c::<F>(GELU_K) * (x + c::<F>(GELU_A) * x2 * x);
    let t = inner.tanh();
    let dinner = c::<F>(GELU_K) * (F::one() + c::<F>(3.0 * GELU_A) * x2);
    c::<F>(0.5) * (F::one() + t) + c::<F>(0.5) * x * (F::one() - t * t) * dinner
}

pub(crate) fn all_finite<F: Real>(t: &Array2<F>) -> bool {
    t.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&array![[0.0f64, 0.0]]);
        assert_abs_diff_eq!(s[[0, 0]], 0.5, epsilon = 1e-12);

        let s = softmax_rows(&array![[1.0f64.ln(), 3.0f64.ln()]]);
        assert_abs_diff_eq!(s[[0, 0]], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s[[0, 1]], 0.75, epsilon = 1e-12);

        let a = softmax_rows(&array![[5.0f64, 5.0]]);
        let b = softmax_rows(&array![[0.0f64, 0.0]]);
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax_rows(&array![[1000.0f64, 0.0, -1000.0]]);
        assert!(all_finite(&s));
        assert_abs_diff_eq!(s[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zscore_examples() {
        let z = zscore_normalize(array![1.0f64, 2.0, 3.0].view());
        assert_abs_diff_eq!(z[0], -1.224_744_871, epsilon = 1e-6);
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[2], 1.224_744_871, epsilon = 1e-6);

        let z = zscore_normalize(array![5.0f64, 5.0, 5.0].view());
        assert_eq!(z, array![0.0, 0.0, 0.0]);

        let v = array![1.0f64, 2.0, 3.0];
        let w = v.mapv(|x| 2.0 * x + 7.0);
        let (a, b) = (zscore_normalize(v.view()), zscore_normalize(w.view()));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn gelu_fixed_point_and_derivative() {
        assert_eq!(gelu(0.0f64), 0.0);
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6,
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let cols = vals.len();
            let mut t = Array2::zeros((rows, cols));
            for r in 0..rows {
                for (c, v) in vals.iter().enumerate() {
                    t[[r, c]] = v * (r as f64 + 1.0);
                }
            }
            let s = softmax_rows(&t);
            for row in s.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn zscore_affine_invariance(
            v in proptest::collection::vec(-100.0f64..100.0, 2..32),
            a in 0.01f64..50.0,
            b in -100.0f64..100.0,
        ) {
            let v = Array1::from(v);
            let var = v.var(0.0);
            prop_assume!(var > 1e-3);
            let w = v.mapv(|x| a * x + b);
            let (za, zb) = (zscore_normalize(v.view()), zscore_normalize(w.view()));
            for (x, y) in za.iter().zip(zb.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
