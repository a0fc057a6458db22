use super::{Scalar, Tensor};
use crate::error::{MlsaError, Result};

/// Variance regularizer used by every layer normalization in the model.
pub const LAYERNORM_EPS: f64 = 1e-12;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`; when `ta` is set, `a` is stored as `k x m`.
/// `op(b)` is `k x n`; when `tb` is set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above cover the largest addressed index
    // for both storage orders, and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(MlsaError::shape(format!("matmul needs rank-2 operands, got {:?} and {:?}", a.dims(), b.dims())));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(MlsaError::shape(format!("matmul inner dims disagree: {:?} x {:?}", a.dims(), b.dims())));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(false, false, m, n, k, T::one(), a.data(), b.data(), T::zero(), out.data_mut());
    Ok(out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let dims = x.dims();
    if axis >= dims.len() {
        return Err(MlsaError::shape(format!("softmax axis {axis} out of range for {dims:?}")));
    }
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..len).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                data[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[at(j)] /= total;
            }
        }
    }
    Ok(out)
}

/// In-place stable softmax over each contiguous row of width `cols`.
pub(crate) fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = total.recip();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Row-wise layer normalization of `x` with per-feature gain and bias.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(MlsaError::shape(format!(
            "layernorm over {d} features got gain {:?} and bias {:?}",
            gain.dims(),
            bias.dims()
        )));
    }
    if eps <= T::zero() {
        return Err(MlsaError::Domain("layernorm eps must be positive".into()));
    }
    let mut out = Tensor::zeros(x.dims());
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); x.rows()];
    layernorm_rows(x.data(), d, gain.data(), bias.data(), eps, out.data_mut(), &mut xhat, &mut rstd);
    Ok(out)
}

/// Layer normalization kernel; also records the normalized rows and the
/// reciprocal standard deviations needed for the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_rows<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        let base = r * d;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[base + j] = h;
            out[base + j] = h * gain[j] + bias[j];
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * T::of(0.5) * (T::one() + (x * T::of(INV_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(INV_SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp();
    cdf + x * pdf
}

#[inline]
pub(crate) fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = random(&[2, 3], 1);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 2);
        let b = random(&[7, 3], 3);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        assert!(got.max_rel_diff(&want, 1e-12).unwrap() <= 1e-6);

        let af: Tensor<f32> = a.cast();
        let bf: Tensor<f32> = b.cast();
        let gotf: Tensor<f64> = matmul(&af, &bf).unwrap().cast();
        assert!(gotf.max_rel_diff(&want, 1e-3).unwrap() <= 1e-5);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = random(&[2, 3], 1);
        assert!(matches!(matmul(&a, &a), Err(MlsaError::Shape(_))));
    }

    #[test]
    fn transposed_gemm_variants() {
        let a = random(&[4, 6], 4);
        let b = random(&[6, 5], 5);
        let want = naive_matmul(&a, &b);
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let lhs = if ta { &at } else { &a };
            let rhs = if tb { &bt } else { &b };
            let mut c = vec![0.0; 20];
            gemm(ta, tb, 4, 5, 6, 1.0, lhs.data(), rhs.data(), 0.0, &mut c);
            let got = Tensor::new(&[4, 5], c).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "ta={ta} tb={tb}");
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let z = softmax(&Tensor::<f64>::zeros(&[1, 4]), 1).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for x in [-1e3, 0.0, 7.5, 1e3] {
            let s = softmax(&Tensor::vector(vec![x, x]).unwrap(), 0).unwrap();
            assert_eq!(s.data(), &[0.5, 0.5]);
        }
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
        assert!(softmax(&s, 1).is_err());
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = random(&[2, 3, 4], 9);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| s.data()[o * 12 + j * 4 + i]).sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_cases() {
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let eps = LAYERNORM_EPS;
        let c = Tensor::from_rows(&[vec![3.0, 3.0]]).unwrap();
        assert_eq!(layernorm(&c, &g, &b, eps).unwrap().data(), &[0.0, 0.0]);
        let fixed = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let out = layernorm(&fixed, &g, &b, eps).unwrap();
        assert_abs_diff_eq!(out.data()[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.data()[1], -1.0, epsilon = 1e-9);

        let x = random(&[1, 16], 11);
        let out = layernorm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), eps).unwrap();
        let mean = out.sum() / 16.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
        assert!(layernorm(&x, &g, &b, eps).is_err());
    }

    /// Standard normal CDF by composite Simpson quadrature of the density.
    fn phi_by_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn activation_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert_eq!(silu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-4);
        assert!((silu_scalar(10.0f64) - 10.0).abs() < 1e-3);
        let want = phi_by_quadrature(1.0);
        assert_abs_diff_eq!(want, 0.841345, epsilon = 1e-6);
        assert_abs_diff_eq!(gelu_scalar(1.0f64), want, epsilon = 1e-9);
        assert_abs_diff_eq!(gelu_scalar(1.0f32) as f64, want, epsilon = 1e-6);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = |f: fn(f64) -> f64| (f(x + h) - f(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd(gelu_scalar), epsilon = 1e-8);
            assert_abs_diff_eq!(silu_grad(x), fd(silu_scalar), epsilon = 1e-8);
            assert_abs_diff_eq!(sigmoid(x), fd(softplus_scalar), epsilon = 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus_scalar(1000.0f32), 1000.0);
        assert!(softplus_scalar(-1000.0f32) >= 0.0);
        assert_abs_diff_eq!(softplus_scalar(0.0f64), 2f64.ln(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            row in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let x = Tensor::vector(row.clone()).unwrap();
            let s = softmax(&x, 0).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted = Tensor::vector(row.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax(&shifted, 0).unwrap();
            prop_assert!(s.max_abs_diff(&s2).unwrap() < 1e-9);
        }

        #[test]
        fn layernorm_is_affine_invariant(
            row in prop::collection::vec(-5.0f64..5.0, 4..16),
            scale in 0.1f64..10.0,
            offset in -10.0f64..10.0,
        ) {
            let d = row.len();
            let spread = row.iter().cloned().fold(f64::MIN, f64::max)
                - row.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-2);
            let g = Tensor::full(&[d], 1.0);
            let b = Tensor::zeros(&[d]);
            let x = Tensor::new(&[1, d], row.clone()).unwrap();
            let y = Tensor::new(&[1, d], row.iter().map(|v| scale * v + offset).collect()).unwrap();
            let lx = layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap();
            let ly = layernorm(&y, &g, &b, LAYERNORM_EPS).unwrap();
            prop_assert!(lx.max_abs_diff(&ly).unwrap() < 1e-5);
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let a = random(&[3, 4], seed);
            let b = random(&[4, 5], seed + 1);
            let c = random(&[5, 2], seed + 2);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_rel_diff(&right, 1e-3).unwrap() < 1e-10);

            let (af, bf, cf): (Tensor<f32>, Tensor<f32>, Tensor<f32>) = (a.cast(), b.cast(), c.cast());
            let lf = matmul(&matmul(&af, &bf).unwrap(), &cf).unwrap();
            let rf = matmul(&af, &matmul(&bf, &cf).unwrap()).unwrap();
            prop_assert!(lf.max_rel_diff(&rf, 1e-2).unwrap() < 1e-4);
        }
    }
}
