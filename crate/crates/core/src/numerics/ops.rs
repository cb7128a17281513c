use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `max + ln Σ exp(x - max)`.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`. A zero-norm operand yields 0.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    (dot(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

/// Accumulates `scale · ∂cos(a,b)/∂a` into `grad_a` and `scale · ∂cos(a,b)/∂b`
/// into `grad_b`. Zero-norm operands contribute nothing, matching the
/// constant-0 convention of [`cosine_sim`].
pub(crate) fn cosine_sim_backward<T: Scalar>(a: &[T], b: &[T], scale: T, grad_a: &mut [T], grad_b: &mut [T]) {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return;
    }
    let inv = T::one() / (na * nb);
    let cos = dot(a, b) * inv;
    let (ca, cb) = (cos / (na * na), cos / (nb * nb));
    for i in 0..a.len() {
        grad_a[i] += scale * (b[i] * inv - ca * a[i]);
        grad_b[i] += scale * (a[i] * inv - cb * b[i]);
    }
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Glorot-uniform initialization in `±√(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of(rng.random_range(-limit..=limit)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches by construction")
}
