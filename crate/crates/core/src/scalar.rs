//! Scalar abstraction shared by the tree engine.
//!
//! Brackets, probabilities and norms stay in `f64`; only process values are
//! generic, so real (`f32`, `f64`) and complex entries go through the same code.

use std::fmt::Debug;
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, Num, NumAssign};

pub trait Scalar:
    Copy + Debug + PartialEq + Num + NumAssign + std::ops::Neg<Output = Self> + Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn conj(self) -> Self;
    /// |x|² as f64.
    fn abs_sq(self) -> f64;
    fn re(self) -> f64;
    fn im(self) -> f64;

    fn modulus(self) -> f64 {
        self.abs_sq().sqrt()
    }

    fn is_finite(self) -> bool {
        self.re().is_finite() && self.im().is_finite()
    }
}

macro_rules! real_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn conj(self) -> Self {
                self
            }
            #[inline]
            fn abs_sq(self) -> f64 {
                let x = self as f64;
                x * x
            }
            #[inline]
            fn re(self) -> f64 {
                self as f64
            }
            #[inline]
            fn im(self) -> f64 {
                0.0
            }
        }
    };
}

real_scalar!(f32);
real_scalar!(f64);

impl<T> Scalar for Complex<T>
where
    T: Float + NumAssign + Debug + Send + Sync + 'static + Into<f64> + num_traits::FromPrimitive,
{
    #[inline]
    fn from_f64(x: f64) -> Self {
        Complex::new(T::from_f64(x).unwrap_or_else(T::nan), T::zero())
    }
    #[inline]
    fn conj(self) -> Self {
        Complex::conj(&self)
    }
    #[inline]
    fn abs_sq(self) -> f64 {
        let (r, i): (f64, f64) = (self.re.into(), self.im.into());
        r * r + i * i
    }
    #[inline]
    fn re(self) -> f64 {
        self.re.into()
    }
    #[inline]
    fn im(self) -> f64 {
        self.im.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn modulus_matches_components() {
        let z = Complex64::new(3.0, -4.0);
        assert_eq!(z.modulus(), 5.0);
        assert_eq!(Scalar::conj(z), Complex64::new(3.0, 4.0));
        assert_eq!((-2.0f32).abs_sq(), 4.0);
        assert_eq!(<f64 as Scalar>::from_f64(1.5).im(), 0.0);
    }
}
