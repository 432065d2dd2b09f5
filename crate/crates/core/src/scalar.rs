//! Floating-point abstraction so the engine runs in both precisions.
//!
//! `f64` is the verification mode (finite-difference checks need the
//! headroom); `f32` is the training mode.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Clone
    + Debug
    + Display
    + Default
    + PartialOrd
    + PartialEq
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
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Element-wise sign with sign(0) = 0.
    fn signum_zero(self) -> Self {
        if self > Self::ZERO {
            Self::ONE
        } else if self < Self::ZERO {
            -Self::ONE
        } else {
            Self::ZERO
        }
    }

    fn sigmoid(self) -> Self {
        // Split on sign to avoid exp overflow on large-magnitude inputs.
        if self >= Self::ZERO {
            Self::ONE / (Self::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::ONE + e)
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                if self >= other { self } else { other }
            }
            fn minimum(self, other: Self) -> Self {
                if self <= other { self } else { other }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_zero_convention() {
        assert_eq!(2.5f64.signum_zero(), 1.0);
        assert_eq!((-0.1f64).signum_zero(), -1.0);
        assert_eq!(0.0f64.signum_zero(), 0.0);
    }

    #[test]
    fn sigmoid_is_symmetric_at_zero() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        let s = 3.0f64.sigmoid() + (-3.0f64).sigmoid();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert!(1e6f32.sigmoid().is_finite());
        assert!((-1e6f32).sigmoid().is_finite());
        assert!((1e6f64.sigmoid() - 1.0).abs() < 1e-12);
    }
}
