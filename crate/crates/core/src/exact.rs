//! Exact rational arithmetic for element and byte counts.
//!
//! The closed-form volume models produce values like `2*(p-1)/p * buff` that
//! are not always integers; cross-checks between the analytic models and the
//! simulator demand exact equality, so everything is carried as a rational
//! and only converted to a float or rounded at an output boundary.

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Sub};

/// The rational type used throughout the crate.
pub type Rat = Ratio<i128>;

/// Shorthand for an integer-valued rational.
pub fn rat(n: i128) -> Rat {
    Rat::from_integer(n)
}

/// `num / den` as a rational.
pub fn frac(num: i128, den: i128) -> Rat {
    Rat::new(num, den)
}

/// Round half-up to the nearest integer.
pub fn round_half_up(r: Rat) -> i128 {
    (r + frac(1, 2)).floor().to_integer()
}

/// An exact count (elements, bytes, time units) that serializes as a JSON
/// integer when integral and as a decimal string with 12 significant digits
/// otherwise, keeping cross-language round-tripping lossless.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Exact(pub Rat);

impl Exact {
    pub fn zero() -> Self {
        Exact(Rat::zero())
    }

    pub fn is_integer(&self) -> bool {
        self.0.is_integer()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// Nearest integer, rounding half-up.
    pub fn round(&self) -> i128 {
        round_half_up(self.0)
    }
}

impl From<Rat> for Exact {
    fn from(r: Rat) -> Self {
        Exact(r)
    }
}

impl From<i128> for Exact {
    fn from(n: i128) -> Self {
        Exact(rat(n))
    }
}

impl From<u64> for Exact {
    fn from(n: u64) -> Self {
        Exact(rat(n as i128))
    }
}

impl Add for Exact {
    type Output = Exact;
    fn add(self, rhs: Exact) -> Exact {
        Exact(self.0 + rhs.0)
    }
}

impl AddAssign for Exact {
    fn add_assign(&mut self, rhs: Exact) {
        self.0 += rhs.0;
    }
}

impl Sub for Exact {
    type Output = Exact;
    fn sub(self, rhs: Exact) -> Exact {
        Exact(self.0 - rhs.0)
    }
}

impl Mul for Exact {
    type Output = Exact;
    fn mul(self, rhs: Exact) -> Exact {
        Exact(self.0 * rhs.0)
    }
}

impl Div for Exact {
    type Output = Exact;
    fn div(self, rhs: Exact) -> Exact {
        Exact(self.0 / rhs.0)
    }
}

impl Sum for Exact {
    fn sum<I: Iterator<Item = Exact>>(iter: I) -> Exact {
        iter.fold(Exact::zero(), |a, b| a + b)
    }
}

impl fmt::Debug for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0.to_integer())
        } else {
            write!(f, "{}", decimal_12(self.0))
        }
    }
}

/// Decimal string with 12 significant digits.
fn decimal_12(r: Rat) -> String {
    let sign = if r.is_negative() { "-" } else { "" };
    let r = r.abs();
    let mut int_part = r.to_integer();
    let mut digits = 0i128;
    let mut scale = 1i128;
    // significant digits already used by the integer part
    let mut tmp = int_part;
    while tmp > 0 {
        digits += 1;
        tmp /= 10;
    }
    let frac_digits = (12 - digits).max(0);
    for _ in 0..frac_digits {
        scale *= 10;
    }
    let scaled = round_half_up(r * rat(scale));
    int_part = scaled / scale;
    let frac_part = scaled % scale;
    if frac_digits == 0 || frac_part == 0 {
        return format!("{sign}{int_part}");
    }
    let s = format!("{:0width$}", frac_part, width = frac_digits as usize);
    let s = s.trim_end_matches('0');
    format!("{sign}{int_part}.{s}")
}

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_integer() {
            let n = self.0.to_integer();
            if let Ok(v) = i64::try_from(n) {
                return serializer.serialize_i64(v);
            }
        }
        serializer.serialize_str(&self.to_string())
    }
}

struct ExactVisitor;

impl Visitor<'_> for ExactVisitor {
    type Value = Exact;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an integer or a rational string like \"3/4\"")
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Exact, E> {
        Ok(Exact::from(v as i128))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Exact, E> {
        Ok(Exact::from(v))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Exact, E> {
        if let Some((num, den)) = v.split_once('/') {
            let num: i128 = num.trim().parse().map_err(de::Error::custom)?;
            let den: i128 = den.trim().parse().map_err(de::Error::custom)?;
            return Ok(Exact(Rat::new(num, den)));
        }
        let f: f64 = v.parse().map_err(de::Error::custom)?;
        Rat::approximate_float(f)
            .map(Exact)
            .ok_or_else(|| de::Error::custom("unrepresentable decimal"))
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Exact, D::Error> {
        deserializer.deserialize_any(ExactVisitor)
    }
}
