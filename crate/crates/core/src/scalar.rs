//! Numeric traits shared by the crate.
//!
//! Two tiers are used. [`Field`] is the minimal arithmetic needed by the
//! discourse-distribution code and the ROUGE ratio computations; it is
//! implemented by `f32`, `f64` and exact rationals, so fixtures can be
//! checked without rounding. [`Scalar`] adds the floating point operations
//! and BLAS-style kernels needed by the adapter math and the toy backbone.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Exact rational used for fixture comparisons.
pub type Rational = Ratio<i64>;

/// Arithmetic field elements with a total-enough order for thresholding.
pub trait Field: Num + Clone + PartialOrd + Debug {
    /// Embed a non-negative count.
    fn from_count(n: usize) -> Self;

    /// Parse a decimal literal such as `0.8`. Used to build fixtures.
    fn from_decimal(text: &str) -> Option<Self>;

    fn to_f64_lossy(&self) -> f64;
}

impl Field for f32 {
    fn from_count(n: usize) -> Self {
        n as f32
    }
    fn from_decimal(text: &str) -> Option<Self> {
        text.parse().ok()
    }
    fn to_f64_lossy(&self) -> f64 {
        f64::from(*self)
    }
}

impl Field for f64 {
    fn from_count(n: usize) -> Self {
        n as f64
    }
    fn from_decimal(text: &str) -> Option<Self> {
        text.parse().ok()
    }
    fn to_f64_lossy(&self) -> f64 {
        *self
    }
}

impl Field for Rational {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }

    fn from_decimal(text: &str) -> Option<Self> {
        let text = text.trim();
        let (negative, body) = match text.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        let digits = format!("{int_part}{frac_part}");
        let numer: i64 = digits.parse().ok()?;
        let denom = 10i64.checked_pow(frac_part.len() as u32)?;
        let value = Ratio::new(numer, denom);
        Some(if negative { -value } else { value })
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Floating point element type of activations and weights (`f32` or `f64`).
pub trait Scalar:
    Float
    + Field
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Number of bits in the storage format; used in manifests.
    const BITS: u32;

    fn from_f64_lossy(value: f64) -> Self;

    /// Raw little-endian bytes of the value widened/narrowed to `f32`.
    fn to_le_f32_bytes(self) -> [u8; 4] {
        self.to_f32().unwrap_or(f32::NAN).to_le_bytes()
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;
    fn from_f64_lossy(value: f64) -> Self {
        value as f32
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;
    fn from_f64_lossy(value: f64) -> Self {
        value
    }
}

/// Run-time precision selector used by configs and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "32", alias = "f32", alias = "32-bit")]
    F32,
    #[serde(rename = "64", alias = "f64", alias = "64-bit")]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "32" | "f32" | "32-bit" => Ok(Precision::F32),
            "64" | "f64" | "64-bit" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected 32 or 64)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_decimal_parsing() {
        assert_eq!(Rational::from_decimal("0.8"), Some(Ratio::new(4, 5)));
        assert_eq!(Rational::from_decimal("1"), Some(Ratio::from_integer(1)));
        assert_eq!(Rational::from_decimal("-0.25"), Some(Ratio::new(-1, 4)));
        assert_eq!(Rational::from_decimal(".5"), Some(Ratio::new(1, 2)));
        assert_eq!(Rational::from_decimal("x"), None);
    }

    #[test]
    fn precision_parses() {
        assert_eq!("64".parse::<Precision>().unwrap(), Precision::F64);
        assert!("16".parse::<Precision>().is_err());
    }
}
