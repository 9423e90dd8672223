//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating point type the reconciliation routines are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted in the documentation
/// are tuned for `f64`; with `f32` they are floored at a small multiple of
/// machine epsilon (see [`tolerance`]).
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    // from_f64 is infallible for f32/f64; the fallback keeps exotic impls honest.
    T::from_f64(x).unwrap_or_else(|| nalgebra::convert(x))
}

/// Converts `T` to `f64` (lossless for `f32`/`f64`).
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Relative tolerance `rel`, floored at `64 * eps` of `T`.
#[inline]
pub fn tolerance<T: Real>(rel: f64) -> T {
    let floor = T::default_epsilon() * lit::<T>(64.0);
    let tol = lit::<T>(rel);
    if tol > floor {
        tol
    } else {
        floor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_is_floored_for_f32() {
        let t: f32 = tolerance(1e-12);
        assert!(t > 1e-6);
        let t: f64 = tolerance(1e-12);
        assert_eq!(t, 1e-12);
    }

    #[test]
    fn literal_round_trip() {
        assert_eq!(to_f64(lit::<f64>(0.1)), 0.1);
        assert_eq!(lit::<f32>(0.5), 0.5f32);
    }
}
