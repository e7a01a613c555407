//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar used throughout the toolkit (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Lossy conversion from a count.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Pairwise summation; fixed reduction tree so results are bit-stable.
pub fn pairwise_sum<T: Real>(values: &[T]) -> T {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Signed circular difference `a - b` on a ring of `n` cells, in `(-n/2, n/2]`.
#[inline]
pub fn circular_diff<T: Real>(a: T, b: T, n: usize) -> T {
    let n = T::from_count(n);
    let half = n / T::lit(2.0);
    let mut d = (a - b) % n;
    if d > half {
        d -= n;
    } else if d <= -half {
        d += n;
    }
    d
}
