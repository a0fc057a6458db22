//! Dense row-major tensors of rank 1 to 3, the elementwise and reduction
//! kernels built on them, and a reverse-mode tape ([`graph::Graph`]) that
//! differentiates compositions of those kernels.
//!
//! Everything is generic over [`Scalar`], implemented for `f32` (training and
//! inference) and `f64` (gradient checking).

pub mod graph;
pub mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{MlsaError, Result};

pub use graph::{Graph, Var};
pub use ops::{gelu, layernorm, matmul, silu, softmax, softplus, LAYERNORM_EPS};

/// Floating point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
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
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn erf(self) -> Self;

    /// `exp(self) - 1`; the `f32` version is branch-free so loops over it vectorize.
    fn expm1_fast(self) -> Self;

    /// `c = alpha * a * b + beta * c` over strided operands.
    ///
    /// # Safety
    /// Every element addressed by the shapes and strides must be in bounds of
    /// the corresponding buffer, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Range reduction `z = k ln2 + r`, `|r| <= ln2 / 2`, then a degree-8 Taylor
/// polynomial for `expm1(r)`. Inputs are clamped to `[-87, 88]`; NaN propagates.
#[inline]
fn expm1_f32(z: f32) -> f32 {
    const LN2_HI: f32 = 6.931_457_5e-1;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const SHIFTER: f32 = 12_582_912.0;
    let z = z.clamp(-87.0, 88.0);
    let t = z * std::f32::consts::LOG2_E + SHIFTER;
    let kf = t - SHIFTER;
    let k = t.to_bits().wrapping_sub(SHIFTER.to_bits());
    let r = (z - kf * LN2_HI) - kf * LN2_LO;
    let p = r
        * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0 + r * (1.0 / 40320.0))))))));
    let scale = f32::from_bits(k.wrapping_add(127) << 23);
    scale * p + (scale - 1.0)
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    #[inline]
    fn expm1_fast(self) -> Self {
        expm1_f32(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    #[inline]
    fn expm1_fast(self) -> Self {
        self.exp_m1()
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense tensor with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(MlsaError::shape(format!("dims {dims:?} need {expected} values, got {}", data.len())));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    /// Panics on invalid dims; use for shapes derived from already validated ones.
    pub fn zeros(dims: &[usize]) -> Self {
        check_dims(dims).expect("invalid tensor dims");
        Tensor { dims: dims.to_vec(), data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MlsaError::shape("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(MlsaError::shape("transpose needs a rank-2 tensor"));
        }
        let (r, c) = (self.dims[0], self.dims[1]);
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MlsaError::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest elementwise `|self - other|`; `None` when the shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        (self.dims == other.dims)
            .then(|| self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max))
    }

    /// Largest elementwise `|self - other| / max(|other|, floor)`.
    pub fn max_rel_diff(&self, other: &Self, floor: T) -> Option<T> {
        (self.dims == other.dims).then(|| {
            self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs() / b.abs().max(floor)).fold(T::zero(), T::max)
        })
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 3 {
        return Err(MlsaError::shape(format!("rank must be 1..=3, got {}", dims.len())));
    }
    if dims.contains(&0) {
        return Err(MlsaError::shape(format!("zero-sized axis in {dims:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_expm1_tracks_f64() {
        let mut worst = 0.0f64;
        for i in -200_000..=50_000 {
            let z = i as f32 * 4e-4;
            for z in [z, z * 1e-4] {
                let want = (z as f64).exp_m1();
                let got = expm1_f32(z) as f64;
                worst = worst.max(((got - want) / want.abs().max(1e-30)).abs());
            }
        }
        assert!(worst < 5e-7, "{worst}");
        assert_eq!(expm1_f32(0.0), 0.0);
        assert_eq!(expm1_f32(-1000.0), -1.0);
        assert!(expm1_f32(f32::NAN).is_nan());
    }

    #[test]
    fn construction_checks_product() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let t = Tensor::<f64>::from_fn(&[3, 5], |i| i as f64);
        let tt = t.transpose().unwrap();
        assert_eq!(tt.dims(), &[5, 3]);
        assert_eq!(tt.at(4, 2), t.at(2, 4));
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::<f32>::vector(vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.check_finite("x"), Err(MlsaError::NonFinite(_))));
    }
}
