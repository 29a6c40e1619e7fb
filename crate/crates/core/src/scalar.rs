//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All tables, networks and bound evaluations are written against [`Real`],
//! which is implemented for `f32` and `f64`. Special functions (error
//! function, inverse normal CDF, gamma) are evaluated in `f64` and converted
//! back, so `f32` instantiations trade accuracy for memory only.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar usable throughout the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }

    /// Conversion from a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is representable in every Real")
    }

    #[inline]
    fn to64(self) -> f64 {
        self.to_f64().expect("Real always converts to f64")
    }

    /// Machine epsilon scaled to a loose comparison slack.
    #[inline]
    fn slack() -> Self {
        Self::epsilon() * Self::of(64.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sup norm of the elementwise difference of two equal-length slices.
pub fn sup_diff<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(S::zero(), S::max)
}

/// Largest absolute entry.
pub fn sup_abs<S: Real>(a: &[S]) -> S {
    a.iter().map(|x| x.abs()).fold(S::zero(), S::max)
}

/// Index of the largest entry, ties resolved to the lowest index.
pub fn argmax_lowest<S: Real>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
