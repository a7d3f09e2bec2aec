//! Dense N-dimensional tensors in row-major layout.
//!
//! `Tensor<T>` is an immutable value type: data is shared behind an `Arc`,
//! clones are cheap, and every constructor rejects non-finite values so
//! NaN/Inf can never propagate silently. Image-like tensors use NCHW order.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {ctx}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        ctx: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced in {ctx}")]
    NonFinite { ctx: &'static str },
    #[error("domain violation in {ctx}: {msg}")]
    Domain { ctx: &'static str, msg: String },
    #[error("invalid argument in {ctx}: {msg}")]
    Invalid { ctx: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type for tensors: f32 for training throughput, f64 for the
/// verification suites (log-det and gradcheck tolerances need it).
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Checkpoint dtype tag (0 = f32, 1 = f64).
    const DTYPE_TAG: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, p: Self) -> Self;
    fn maximum(self, o: Self) -> Self;
    fn minimum(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE_TAG: u8 = $tag;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn powf(self, p: Self) -> Self {
                self.powf(p)
            }
            #[inline]
            fn maximum(self, o: Self) -> Self {
                self.max(o)
            }
            #[inline]
            fn minimum(self, o: Self) -> Self {
                self.min(o)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32, 0);
impl_scalar!(f64, 1);

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                ctx: "Tensor::new",
                msg: format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid {
                ctx: "Tensor::new",
                msg: format!("zero dimension in shape {:?}", shape),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { ctx: "Tensor::new" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Constructor for values already known finite (internal fast path).
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape, vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::new_unchecked(vec![1], vec![v])
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::new_unchecked(shape, (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(TensorError::Invalid {
                ctx: "Tensor::item",
                msg: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::Invalid {
                ctx: "Tensor::reshaped",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { ctx: "Tensor::map" });
        }
        Ok(Self::new_unchecked(self.shape.clone(), data))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| v.maximum(lo).minimum(hi))
            .collect();
        Self::new_unchecked(self.shape.clone(), data)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::new_unchecked(
            self.shape.clone(),
            self.data.iter().map(|v| v.to_f64()).collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new_unchecked(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        same_shape("max_abs_diff", self.shape(), other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max))
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        same_shape("mean_abs_diff", self.shape(), other.shape())?;
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .sum();
        Ok(s / self.numel() as f64)
    }
}

pub(crate) fn same_shape(ctx: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            ctx,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan() {
        let r = Tensor::new(vec![2], vec![1.0f64, f64::NAN]);
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::new(vec![3], vec![1.0f64, 2.0]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }
}
