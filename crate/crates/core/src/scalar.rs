use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used throughout the crate.
///
/// Implemented for `f32` and `f64`. Random draws are produced in `f64` and
/// narrowed with [`Scalar::of`], so key streams are identical across scalar
/// types up to rounding.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable in every Scalar")
    }

    /// Conversion from a count.
    #[inline]
    fn of_usize(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::of(0.5)
    }

    /// Absolute tolerance for probability-mass checks over `len` entries.
    ///
    /// `1e-9` for `f64`; relaxed proportionally to machine epsilon for
    /// narrower types.
    #[inline]
    fn mass_tolerance(len: usize) -> Self {
        let eps = Self::epsilon() * Self::of_usize(len.max(1)) * Self::of(4.0);
        eps.max(Self::of(1e-9))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
