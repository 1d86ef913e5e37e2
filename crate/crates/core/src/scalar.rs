use nalgebra::ComplexField;
use num_complex::Complex64;

/// Field used by the sparse kernels: `f64` on the real (zero-frequency) path and
/// `Complex64` otherwise.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Default {
    fn from_c64(c: Complex64) -> Self;
    fn to_c64(self) -> Complex64;
    fn from_f(x: f64) -> Self;
    fn abs_sq(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_c64(c: Complex64) -> Self {
        c.re
    }
    #[inline]
    fn to_c64(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
    #[inline]
    fn from_f(x: f64) -> Self {
        x
    }
    #[inline]
    fn abs_sq(self) -> f64 {
        self * self
    }
}

impl Scalar for Complex64 {
    #[inline]
    fn from_c64(c: Complex64) -> Self {
        c
    }
    #[inline]
    fn to_c64(self) -> Complex64 {
        self
    }
    #[inline]
    fn from_f(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    #[inline]
    fn abs_sq(self) -> f64 {
        self.norm_sqr()
    }
}
