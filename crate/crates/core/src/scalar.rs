//! Floating-point abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// f32 or f64.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)`, stable for large `|z|`.
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// `ln σ(z)`; finite wherever `σ(z)` underflows.
pub fn log_sigmoid<T: Scalar>(z: T) -> T {
    -softplus(-z)
}

/// Log-sum-exp of a non-empty slice.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).fold(T::zero(), |a, b| a + b).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(1.0f64) - 0.7310585786300049).abs() < 1e-15);
        let tiny = sigmoid(-1000.0f64);
        assert!(tiny.is_finite() && (0.0..1e-300).contains(&tiny));
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.5f32) - 0.62245935).abs() < 1e-6);
    }

    #[test]
    fn log_sigmoid_does_not_underflow() {
        assert!((log_sigmoid(-1000.0f64) + 1000.0).abs() < 1e-12);
        assert!((log_sigmoid(1.0f64) - 0.7310585786300049f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lse() {
        let v = log_sum_exp(&[1000.0f64, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
