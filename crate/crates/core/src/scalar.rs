//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless widening used for hashing and logging.
    fn widen(self) -> f64;

    /// Converts an `f64` literal or config value; panics only on non-representable input,
    /// which cannot happen for `f32`/`f64`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }
}

impl Scalar for f32 {
    fn widen(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn widen(self) -> f64 {
        self
    }
}
