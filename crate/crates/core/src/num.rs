//! Scalar abstractions.
//!
//! Accuracy bookkeeping is done on integer tallies and only turned into a
//! number at the edge, so the same analysis code runs on `f32`, `f64` or an
//! exact rational. The learning-curve math needs `exp` and therefore a
//! floating point type.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

/// A number that accuracies, deltas and bin means can be expressed in.
pub trait Scalar:
    Num + Signed + Clone + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// `num / den` without going through a float when the type is exact.
    fn ratio(num: i64, den: i64) -> Self;

    /// Lossy conversion used for display and serialization.
    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
}

impl Scalar for f32 {
    fn ratio(num: i64, den: i64) -> Self {
        (num as f64 / den as f64) as f32
    }
}

impl Scalar for Ratio<i64> {
    fn ratio(num: i64, den: i64) -> Self {
        Ratio::new(num, den)
    }
}

/// Floating point scalars usable by the simulated student.
pub trait Real: Scalar + Float {
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Mean of a slice; `None` when empty.
pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let n = T::from_usize(values.len())?;
    let sum = values.iter().cloned().fold(T::zero(), |acc, v| acc + v);
    Some(sum / n)
}

/// Index of the maximum, earliest index on ties. Incomparable values (NaN)
/// never win.
pub fn argmax_earliest<T: PartialOrd>(values: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            None => {
                if v.partial_cmp(v).is_some() {
                    best = Some(i);
                }
            }
            Some(b) => {
                if v > &values[b] {
                    best = Some(i);
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_is_exact_for_rationals() {
        let a = <Ratio<i64> as Scalar>::ratio(4790, 10_000);
        let b = <Ratio<i64> as Scalar>::ratio(4418, 10_000);
        assert_eq!(a - b, Ratio::new(372, 10_000));
    }

    #[test]
    fn mean_of_empty_is_none() {
        assert_eq!(mean::<f64>(&[]), None);
        assert_eq!(mean(&[1.0f64, 2.0, 6.0]), Some(3.0));
    }

    #[test]
    fn argmax_prefers_earliest() {
        assert_eq!(argmax_earliest(&[0.1, 0.5, 0.5, 0.2]), Some(1));
        assert_eq!(argmax_earliest::<f64>(&[]), None);
        assert_eq!(argmax_earliest(&[f64::NAN, 0.3]), Some(1));
    }
}
