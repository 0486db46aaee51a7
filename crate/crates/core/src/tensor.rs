//! Dense row-major tensors and the matrix kernels the autodiff tape is built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::TensorError;

/// Floating-point element type. `f32` is the training precision, `f64` the
/// verification precision used by gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn erf(self) -> Self;

    /// `c += a · b` for strided `[m,k]`, `[k,n]` and `[m,n]` views, where
    /// each view is `(slice, row stride, column stride)`.
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: (&mut [Self], isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: (&mut [Self], isize, isize),
    ) {
        check_view("a", a.0.len(), m, k, a.1, a.2);
        check_view("b", b.0.len(), k, n, b.1, b.2);
        check_view("c", c.0.len(), m, n, c.1, c.2);
        // SAFETY: every index reachable through the strides was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                1.0,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            )
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: (&mut [Self], isize, isize),
    ) {
        check_view("a", a.0.len(), m, k, a.1, a.2);
        check_view("b", b.0.len(), k, n, b.1, b.2);
        check_view("c", c.0.len(), m, n, c.1, c.2);
        // SAFETY: every index reachable through the strides was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                1.0,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, F::zero())
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count when viewed as a matrix; 1-D tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(v.as_f64()).expect("castable"))
                .collect(),
        }
    }

    pub fn sum(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, factor: F) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn norm(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }
}

impl Tensor<f32> {
    /// Bitwise equality, distinguishing e.g. `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_view(name: &str, len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm view `{name}` out of bounds"
    );
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    F::gemm_strided(m, k, n, (a, k_, 1), (b, n_, 1), (c, n_, 1));
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    F::gemm_strided(m, k, n, (a, k_, 1), (b, 1, k_), (c, n_, 1));
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let (m_, n_) = (m as isize, n as isize);
    F::gemm_strided(m, k, n, (a, 1, m_), (b, n_, 1), (c, n_, 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_must_match_buffer() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidShape { .. }));
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::<f32>::from_vec(vec![0.0]);
        let b = Tensor::<f32>::from_vec(vec![-0.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }
}
