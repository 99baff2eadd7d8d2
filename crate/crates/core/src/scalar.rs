//! Floating-point scalar abstraction shared by the numeric modules.
//!
//! Statistics, contrastive features and the boosted-tree learner are written
//! once against [`Scalar`] and instantiated for `f64` (the default aliases at
//! the crate root) or `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real floating-point number usable by the analysis code.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; constants in the analysis code go through this.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    /// Conversion from a count.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Default
        + Sum
        + Send
        + Sync
        + 'static
{
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean<F: Scalar>(xs: &[F]) -> F {
    if xs.is_empty() {
        return F::zero();
    }
    xs.iter().copied().sum::<F>() / F::of_usize(xs.len())
}

/// Variance with divisor `n - ddof`; zero when there are not enough samples.
pub fn variance<F: Scalar>(xs: &[F], ddof: usize) -> F {
    if xs.len() <= ddof {
        return F::zero();
    }
    let m = mean(xs);
    let ss: F = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    ss / F::of_usize(xs.len() - ddof)
}
