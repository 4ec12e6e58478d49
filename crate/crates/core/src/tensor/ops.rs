//! Pure numeric kernels. The tape in [`super::graph`] calls these for its
//! forward values; they are also the inference path.

use super::{gemm, Float, MatMut, Tensor};
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard matrix product of `[m x k]` and `[k x n]`.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(format!("matmul needs 2-D operands, got {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.cols() != b.rows() {
        return Err(Error::dim(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), a.mat(), b.mat(), T::zero(), MatMut::new(&mut out, m, n));
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of one contiguous row, in place.
/// Entries equal to `-inf` come out exactly zero.
pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `log_softmax(row)[target]`, computed stably.
pub(crate) fn log_prob_of<T: Float>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[target] - lse
}

/// Full log-softmax of a row, accumulated in f64.
pub fn log_softmax_f64<T: Float>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.f64() - lse).collect()
}

/// Softmax along `axis`.
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::dim(format!("axis {axis} out of range for rank {}", x.rank())));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let shape = x.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![T::zero(); extent];
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (e, b) in buf.iter_mut().enumerate() {
                *b = data[base + e * inner];
            }
            softmax_in_place(&mut buf);
            for (e, b) in buf.iter().enumerate() {
                data[base + e * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Row-wise layer normalization returning the output with per-row mean and
/// reciprocal standard deviation (needed by the backward pass).
pub(crate) fn layer_norm_forward<T: Float>(
    x: &[T],
    cols: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols;
    let inv_n = T::one() / T::of(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        let o = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            o[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim(format!("layer_norm affine of size {}/{} for width {d}", gamma.len(), beta.len())));
    }
    if eps <= 0.0 {
        return Err(Error::arg("layer_norm eps must be positive"));
    }
    let (out, _, _) = layer_norm_forward(x.data(), d, gamma.data(), beta.data(), T::of(eps));
    Tensor::new(x.shape().to_vec(), out)
}

/// Exact GELU: `x * Phi(x)`.
#[inline]
pub(crate) fn gelu_scalar<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x / T::of(SQRT_2)).erf())
}

/// d/dx of `x * Phi(x)`: `Phi(x) + x * phi(x)`.
#[inline]
pub(crate) fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x / T::of(SQRT_2)).erf());
    let pdf = T::of(INV_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Mean negative log-likelihood over the positions where `mask` is true.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, targets: &[usize], mask: &[bool]) -> Result<T> {
    let v = logits.cols();
    let t = logits.rows();
    if targets.len() != t || mask.len() != t {
        return Err(Error::dim(format!(
            "cross_entropy: {t} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("cross_entropy with every position masked".into()));
    }
    let mut total = 0.0f64;
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        if targets[i] >= v {
            return Err(Error::arg(format!("target id {} >= vocab {v}", targets[i])));
        }
        total -= log_prob_of(logits.row(i), targets[i]).f64();
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross_entropy is not finite".into()));
    }
    Ok(T::of(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&id, &m).unwrap(), m);
        let r = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = matmul(&Tensor::zeros(&[2, 2]), &t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 3]));
        assert!(matches!(matmul(&id, &t(&[&[1.0, 2.0, 3.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[&[0.0, 0.0, 0.0]]), 1).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&t(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]]), 1).unwrap();
        for (v, e) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        let s = softmax(&t(&[&[0.3, f64::NEG_INFINITY]]), 1).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        assert!(softmax(&t(&[&[0.0, f64::NAN]]), 1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let y = layer_norm(&t(&[&[2.0, 2.0]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = layer_norm(&t(&[&[1.0, 3.0]]), &ones, &zeros, 1e-5).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5 && (y.data()[1] - 1.0).abs() < 1e-5);
        let beta = Tensor::from_f64(&[2], &[0.5, -0.25]).unwrap();
        let y = layer_norm(&t(&[&[7.0, -3.0], &[0.1, 9.0]]), &zeros, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(12.0f64) - 12.0).abs() < 1e-9);
        assert!(gelu_scalar(-12.0f64).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&t(&[&[0.0; 4]]), &[2], &[true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&t(&[&[1f64.ln(), 3f64.ln()]]), &[1], &[true]).unwrap();
        assert!((l + (0.75f64).ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for mag in [1.0, 5.0, 20.0, 60.0] {
            let l = cross_entropy(&t(&[&[mag, 0.0, 0.0]]), &[0], &[true]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
        assert!(matches!(cross_entropy(&t(&[&[0.0, 0.0]]), &[0], &[false]), Err(Error::Degenerate(_))));
    }
}
