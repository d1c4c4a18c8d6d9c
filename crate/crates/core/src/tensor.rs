//! Dense row-major tensors with shared storage.
//!
//! Storage is reference counted so reshapes and tape bookkeeping never copy.
//! Reductions accumulate in `f64` regardless of the element type.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::rc::Rc;

/// Floating-point element type usable by the autodiff engine.
pub trait Real:
    Copy
    + Default
    + Debug
    + Display
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// regions, with `c` not aliasing `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
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
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major tensor with reference-counted storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape,
            data: Rc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; len])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| F::from_f64(x as f64)).collect())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a 2-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Same storage, new shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor {
            shape,
            data: Rc::clone(&self.data),
        }
    }

    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.to_f64() as f32).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "elementwise shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64()).sum()
    }

    /// `[R, C] -> [1, C]`
    pub fn sum_rows(&self) -> Self {
        let (r, c) = self.dims2();
        let mut acc = vec![0.0f64; c];
        for row in self.data.chunks_exact(c) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x.to_f64();
            }
        }
        debug_assert_eq!(self.len(), r * c);
        Tensor::new(vec![1, c], acc.into_iter().map(F::from_f64).collect())
    }

    /// `[R, C] -> [R, 1]`
    pub fn sum_cols(&self) -> Self {
        let (r, c) = self.dims2();
        let out: Vec<F> = self
            .data
            .chunks_exact(c)
            .map(|row| F::from_f64(row.iter().map(|x| x.to_f64()).sum()))
            .collect();
        Tensor::new(vec![r, 1], out)
    }

    /// `[1, C] -> [R, C]`
    pub fn broadcast_rows(&self, rows: usize) -> Self {
        let (one, c) = self.dims2();
        assert_eq!(one, 1);
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&self.data);
        }
        Tensor::new(vec![rows, c], out)
    }

    /// `[R, 1] -> [R, C]`
    pub fn broadcast_cols(&self, cols: usize) -> Self {
        let (r, one) = self.dims2();
        assert_eq!(one, 1);
        let mut out = Vec::with_capacity(r * cols);
        for &x in self.data.iter() {
            out.extend(std::iter::repeat_n(x, cols));
        }
        Tensor::new(vec![r, cols], out)
    }

    /// Matrix product of two 2-D tensors with optional transposition.
    pub fn matmul(&self, other: &Self, trans_a: bool, trans_b: bool) -> Self {
        let (ra, ca) = self.dims2();
        let (rb, cb) = other.dims2();
        let (m, k, rsa, csa) = if trans_a {
            (ca, ra, 1isize, ca as isize)
        } else {
            (ra, ca, ca as isize, 1isize)
        };
        let (k2, n, rsb, csb) = if trans_b {
            (cb, rb, 1isize, cb as isize)
        } else {
            (rb, cb, cb as isize, 1isize)
        };
        assert_eq!(
            k, k2,
            "matmul inner dimension mismatch: {:?}{} x {:?}{}",
            self.shape,
            if trans_a { "ᵀ" } else { "" },
            other.shape,
            if trans_b { "ᵀ" } else { "" }
        );
        let mut out = vec![F::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the row-major buffers owned above.
            unsafe {
                F::gemm(
                    m,
                    k,
                    n,
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `out[i] = self[index[i]]`, with [`NO_INDEX`] producing zero.
    pub fn gather(&self, index: &[u32], shape: Vec<usize>) -> Self {
        let src = &self.data;
        let out: Vec<F> = index
            .iter()
            .map(|&i| if i == NO_INDEX { F::zero() } else { src[i as usize] })
            .collect();
        Tensor::new(shape, out)
    }

    /// Adjoint of [`Tensor::gather`]: `out[index[i]] += self[i]`.
    pub fn scatter_add(&self, index: &[u32], shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        let mut out = vec![F::zero(); len];
        for (&i, &g) in index.iter().zip(self.data.iter()) {
            if i != NO_INDEX {
                out[i as usize] += g;
            }
        }
        Tensor::new(shape, out)
    }
}

/// Sentinel gather index for zero padding.
pub const NO_INDEX: u32 = u32::MAX;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transpose_flags_agree_with_naive_product() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let ab = a.matmul(&b, false, false);
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        // (Bᵀ Aᵀ) = (AB)ᵀ
        let bt_at = b.matmul(&a, true, true);
        assert_eq!(bt_at.data(), &[58., 139., 64., 154.]);
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let x = Tensor::<f64>::new(vec![4], vec![1., 2., 3., 4.]);
        let idx = [3, NO_INDEX, 0, 3];
        let g = x.gather(&idx, vec![4]);
        assert_eq!(g.data(), &[4., 0., 1., 4.]);
        let y = Tensor::<f64>::new(vec![4], vec![0.5, -1., 2., 1.]);
        let s = y.scatter_add(&idx, vec![4]);
        // <gather(x), y> == <x, scatter(y)>
        let lhs: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn row_and_column_reductions() {
        let x = Tensor::<f32>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(x.sum_rows().data(), &[5., 7., 9.]);
        assert_eq!(x.sum_cols().data(), &[6., 15.]);
        assert_eq!(x.sum_rows().broadcast_rows(2).shape(), &[2, 3]);
        assert_eq!(x.sum_cols().broadcast_cols(2).data(), &[6., 6., 15., 15.]);
    }
}
