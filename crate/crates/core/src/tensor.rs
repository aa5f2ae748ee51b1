//! Dense row-major tensors and the scalar trait the whole crate is generic over.
//!
//! Activations use channel-major `C×H×W` layout with each plane stored
//! row-major. Training runs in `f32`; gradient checks run in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c[m×n] += a[m×k] · b[k×n]` with arbitrary strides (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_row_stride: isize,
        accumulate: bool,
    );
}

macro_rules! impl_float {
    ($t:ty, $gemm:ident) => {
        impl Float for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                c_row_stride: isize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let max_index = |rows: usize, cols: usize, s: (isize, isize)| {
                    (rows.saturating_sub(1)) as isize * s.0 + (cols.saturating_sub(1)) as isize * s.1
                };
                assert!(k == 0 || (max_index(m, k, a_strides) as usize) < a.len());
                assert!(k == 0 || (max_index(k, n, b_strides) as usize) < b.len());
                assert!((max_index(m, n, (c_row_stride, 1)) as usize) < c.len());
                let beta: $t = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index touched by the kernel is bounded by the
                // asserts above; the three slices do not alias.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_row_stride,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, sgemm);
impl_float!(f64, dgemm);

/// A dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Elementwise product with trailing-dimension broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a - b)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a / b)
    }

    pub fn zip_broadcast(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let shape = broadcast_shape(&self.shape, &other.shape)?;
        let data = broadcast_zip(&self.data, &self.shape, &other.data, &other.shape, &shape, f);
        Tensor::new(shape, data)
    }

    /// `self[M×K] · other[K×N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(vec![m, n], out)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(Error::shape(format!("matmul needs rank-2 operands, got {a:?} and {b:?}")));
    }
    if a[1] != b[0] {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {a:?} · {b:?}"
        )));
    }
    Ok((a[0], a[1], b[1]))
}

/// `out = a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_into<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out, n as isize, false);
}

/// Result shape under the trailing-dimension rule: shapes are right-aligned and
/// every aligned pair of extents must match or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = extent_from_right(a, rank - 1 - i);
        let db = extent_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn extent_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` viewed inside `out_shape`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the flat source offsets of both operands.
pub(crate) fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        (0..numel).for_each(|i| f(i, i, i));
        return;
    }
    let a_numel: usize = a_shape.iter().product();
    let b_numel: usize = b_shape.iter().product();
    if a_shape == out_shape && b_numel == 1 {
        (0..numel).for_each(|i| f(i, i, 0));
        return;
    }
    if b_shape == out_shape && a_numel == 1 {
        (0..numel).for_each(|i| f(i, 0, i));
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_zip<T: Float>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    for_each_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
        out[o] = f(a[ia], b[ib]);
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.rank(), 2);
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        let zero = Tensor::scalar(0.0f64);
        assert_eq!(a.add(&zero).unwrap(), a);
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2]);
        assert!(matches!(a.add(&b), Err(Error::Broadcast { .. })));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let row = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![2.0f64, 5.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[2.0]);
        assert!(matches!(m.matmul(&col.reshape(vec![1, 2]).unwrap()), Err(Error::Shape(_))));
    }
}
