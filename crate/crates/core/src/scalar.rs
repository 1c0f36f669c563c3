//! Scalar abstraction shared by the decomposition algebra and the oracle.
//!
//! Everything that is pure arithmetic (weighted sums, squared deviations,
//! sample variances) is written against [`Scalar`], so it runs unchanged on
//! `f64`, `f32` and exact rationals. Model fitting needs transcendental
//! functions and stays on `f64`.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

pub trait Scalar:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// Lossy conversion used for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_zero(self) -> Self {
        if self < Self::zero() {
            Self::zero()
        } else {
            self
        }
    }

    /// `num / den`, exact where the type allows it.
    fn from_ratio(num: i64, den: i64) -> Self;

    fn abs_val(self) -> Self {
        if self < Self::zero() {
            Self::zero() - self
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
}

impl Scalar for f32 {
    fn from_ratio(num: i64, den: i64) -> Self {
        (num as f64 / den as f64) as f32
    }
}

impl Scalar for Ratio<i64> {
    fn from_ratio(num: i64, den: i64) -> Self {
        Ratio::new(num, den)
    }
}

impl Scalar for Ratio<i128> {
    fn from_ratio(num: i64, den: i64) -> Self {
        Ratio::new(i128::from(num), i128::from(den))
    }
}

/// Parses `"3"`, `"-0.125"` or `"1/3"` into an exact `(numerator, denominator)`.
pub fn parse_ratio(text: &str) -> Option<(i64, i64)> {
    let t = text.trim();
    if let Some((a, b)) = t.split_once('/') {
        let den: i64 = b.trim().parse().ok()?;
        return (den != 0).then_some((a.trim().parse().ok()?, den));
    }
    match t.split_once('.') {
        None => Some((t.parse().ok()?, 1)),
        Some((int, frac)) => {
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 15 {
                return None;
            }
            let den = 10_i64.pow(frac.len() as u32);
            let negative = int.starts_with('-');
            let whole: i64 = if int.is_empty() || int == "-" { 0 } else { int.parse().ok()? };
            let f: i64 = frac.parse().ok()?;
            let num = whole.abs().checked_mul(den)?.checked_add(f)?;
            Some((if negative { -num } else { num }, den))
        }
    }
}

/// Sum with pairwise reduction; deterministic for a given input order.
pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        values.iter().fold(T::zero(), |acc, &v| acc + v)
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Sample variance with divisor `n - 1`. `None` when fewer than two values.
pub fn sample_variance<T: Scalar>(values: &[T]) -> Option<T> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = pairwise_sum(values) / T::from_count(n);
    let dev: Vec<T> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    Some(pairwise_sum(&dev) / T::from_count(n - 1))
}
