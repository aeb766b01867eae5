//! Scalar abstraction for the polarization-state algebra.

use nalgebra::{Complex, RealField};

/// Real scalar used by the state algebra: `f32` or `f64`.
pub trait Real: RealField + Copy {
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    /// Widens this value to `f64`.
    fn to_f64(self) -> f64;

    /// Absolute tolerance for a check stated for `f64`, floored at a few
    /// hundred ulps so single precision stays usable.
    fn tol(f64_tol: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(512.0);
        let t = Self::lit(f64_tol);
        if t > floor {
            t
        } else {
            floor
        }
    }
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Complex amplitude over a [`Real`] scalar.
pub type C<T> = Complex<T>;

pub(crate) fn c<T: Real>(re: f64, im: f64) -> C<T> {
    Complex::new(T::lit(re), T::lit(im))
}

pub(crate) fn cr<T: Real>(re: T) -> C<T> {
    Complex::new(re, T::zero())
}
