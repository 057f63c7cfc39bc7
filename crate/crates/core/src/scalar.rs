//! Scalar abstraction for the numeric kernels.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run in
//! `f32` or `f64`. The shipped pipeline instantiates everything at `f64`
//! (see the type aliases at the crate root), which keeps the central
//! finite-difference gradient checks tight.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Conversion from `f64`; every constant we feed through this is finite.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
