//! Configurable-precision real scalars.
//!
//! All laboratory arithmetic goes through [`Scalar`], which is either a
//! native `f64` (53 mantissa bits) or a software float with a wider
//! mantissa. Precision is chosen once per experiment run; mixed-precision
//! operations promote to the wider operand so that deliberate local
//! promotion (for example in grid-index computations) stays exact.

use std::cmp::Ordering;
use std::fmt;

use rug::float::Constant;
use rug::ops::Pow;
use rug::Float;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Mantissa width in bits. 53 selects native `f64`; anything wider selects
/// the software float path.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Precision(u32);

impl Precision {
    pub const DOUBLE: Precision = Precision(53);

    pub fn new(bits: u32) -> Result<Precision> {
        if bits < 53 {
            return Err(LabError::InvalidConfig(format!(
                "precision must be at least 53 bits, got {bits}"
            )));
        }
        Ok(Precision(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// Relative machine epsilon, 2^(1-bits).
    pub fn epsilon(self) -> f64 {
        2f64.powi(1 - self.0 as i32)
    }

    /// Decimal digits needed for an injective decimal rendering.
    pub fn decimal_digits(self) -> usize {
        (self.0 as f64 * std::f64::consts::LOG10_2).ceil() as usize + 2
    }
}

impl Default for Precision {
    fn default() -> Self {
        Precision::DOUBLE
    }
}

/// A real number carrying its working precision.
#[derive(Clone, Debug)]
pub enum Scalar {
    F64(f64),
    Big(Float),
}

impl Scalar {
    pub fn from_f64(value: f64, prec: Precision) -> Scalar {
        if prec == Precision::DOUBLE {
            Scalar::F64(value)
        } else {
            Scalar::Big(Float::with_val(prec.bits(), value))
        }
    }

    pub fn from_i64(value: i64, prec: Precision) -> Scalar {
        if prec == Precision::DOUBLE {
            Scalar::F64(value as f64)
        } else {
            Scalar::Big(Float::with_val(prec.bits(), value))
        }
    }

    /// p/q rounded once at the target precision.
    pub fn from_ratio(num: i64, den: i64, prec: Precision) -> Scalar {
        if prec == Precision::DOUBLE {
            Scalar::F64(num as f64 / den as f64)
        } else {
            let n = Float::with_val(prec.bits(), num);
            Scalar::Big(Float::with_val(prec.bits(), n / den))
        }
    }

    pub fn zero(prec: Precision) -> Scalar {
        Scalar::from_i64(0, prec)
    }

    pub fn one(prec: Precision) -> Scalar {
        Scalar::from_i64(1, prec)
    }

    pub fn prec(&self) -> Precision {
        match self {
            Scalar::F64(_) => Precision::DOUBLE,
            Scalar::Big(f) => Precision(f.prec()),
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Scalar::F64(v) => *v,
            Scalar::Big(f) => f.to_f64(),
        }
    }

    pub fn to_big(&self, prec: Precision) -> Float {
        match self {
            Scalar::F64(v) => Float::with_val(prec.bits(), *v),
            Scalar::Big(f) => {
                if f.prec() == prec.bits() {
                    f.clone()
                } else {
                    Float::with_val(prec.bits(), f)
                }
            }
        }
    }

    /// Re-round to a target precision.
    pub fn with_prec(&self, prec: Precision) -> Scalar {
        if prec == Precision::DOUBLE {
            Scalar::F64(self.to_f64())
        } else {
            Scalar::Big(self.to_big(prec))
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Scalar::F64(v) => v.is_finite(),
            Scalar::Big(f) => f.is_finite(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Scalar::F64(v) => *v == 0.0,
            Scalar::Big(f) => f.is_zero(),
        }
    }

    pub fn abs(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(v.abs()),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), f.abs_ref())),
        }
    }

    pub fn floor(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(v.floor()),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), f.floor_ref())),
        }
    }

    /// Floor as a machine integer. Panics outside the i64 range, which the
    /// laboratory never reaches (wrap counts and grid levels are small).
    pub fn floor_i64(&self) -> i64 {
        match self {
            Scalar::F64(v) => {
                let f = v.floor();
                assert!(
                    f.abs() < 9.0e18,
                    "floor_i64 out of range: {f}"
                );
                f as i64
            }
            Scalar::Big(f) => {
                let int = Float::with_val(f.prec(), f.floor_ref())
                    .to_integer()
                    .expect("floor of non-finite value");
                int.to_i64().expect("floor_i64 out of range")
            }
        }
    }

    /// Exact rational value. Finite binary floats are dyadic rationals,
    /// so this conversion never rounds.
    pub fn to_rational(&self) -> rug::Rational {
        match self {
            Scalar::F64(v) => rug::Rational::from_f64(*v).expect("finite scalar"),
            Scalar::Big(f) => f.to_rational().expect("finite scalar"),
        }
    }

    pub fn sqrt(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(v.sqrt()),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), f.sqrt_ref())),
        }
    }

    pub fn ln(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(v.ln()),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), f.ln_ref())),
        }
    }

    pub fn exp(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(v.exp()),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), f.exp_ref())),
        }
    }

    /// Natural log evaluated in the native representation, then narrowed.
    /// Safe for values whose magnitude underflows f64.
    pub fn ln_f64(&self) -> f64 {
        match self {
            Scalar::F64(v) => v.ln(),
            Scalar::Big(f) => Float::with_val(f.prec(), f.ln_ref()).to_f64(),
        }
    }

    pub fn log10_f64(&self) -> f64 {
        self.ln_f64() / std::f64::consts::LN_10
    }

    pub fn powi(&self, exp: i32) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(v.powi(exp)),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), f.pow(exp))),
        }
    }

    pub fn recip(&self) -> Scalar {
        &Scalar::one(self.prec()) / self
    }

    /// sin(2 pi x), with the constant carried at elevated precision on the
    /// software path.
    pub fn sin_2pi(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64((2.0 * std::f64::consts::PI * v).sin()),
            Scalar::Big(f) => {
                let wp = f.prec() + 32;
                let two_pi_x = Float::with_val(wp, Constant::Pi) * 2i32 * f;
                Scalar::Big(Float::with_val(f.prec(), two_pi_x.sin()))
            }
        }
    }

    pub fn cos_2pi(&self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64((2.0 * std::f64::consts::PI * v).cos()),
            Scalar::Big(f) => {
                let wp = f.prec() + 32;
                let two_pi_x = Float::with_val(wp, Constant::Pi) * 2i32 * f;
                Scalar::Big(Float::with_val(f.prec(), two_pi_x.cos()))
            }
        }
    }

    pub fn min(&self, other: &Scalar) -> Scalar {
        if self <= other {
            self.clone()
        } else {
            other.clone()
        }
    }

    pub fn max(&self, other: &Scalar) -> Scalar {
        if self >= other {
            self.clone()
        } else {
            other.clone()
        }
    }

    /// Total order assuming finite values.
    pub fn total_cmp(&self, other: &Scalar) -> Ordering {
        self.partial_cmp(other)
            .expect("comparison of non-finite scalars")
    }

    /// Decimal rendering with enough digits to recover the exact binary
    /// value on parse (17 significant digits at 53 bits).
    pub fn to_decimal_string(&self) -> String {
        match self {
            Scalar::F64(v) => format!("{v:.16e}"),
            Scalar::Big(f) => f.to_string_radix(10, Some(self.prec().decimal_digits())),
        }
    }

    pub fn parse(s: &str, prec: Precision) -> Result<Scalar> {
        if prec == Precision::DOUBLE {
            let v: f64 = s
                .parse()
                .map_err(|e| LabError::InvalidConfig(format!("bad scalar {s:?}: {e}")))?;
            Ok(Scalar::F64(v))
        } else {
            let inc = Float::parse(s)
                .map_err(|e| LabError::InvalidConfig(format!("bad scalar {s:?}: {e}")))?;
            Ok(Scalar::Big(Float::with_val(prec.bits(), inc)))
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::F64(v) => write!(f, "{v}"),
            Scalar::Big(b) => write!(f, "{b}"),
        }
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Scalar) -> bool {
        match (self, other) {
            (Scalar::F64(a), Scalar::F64(b)) => a == b,
            _ => {
                let p = self.prec().max(other.prec());
                self.to_big(p) == other.to_big(p)
            }
        }
    }
}

impl PartialOrd for Scalar {
    fn partial_cmp(&self, other: &Scalar) -> Option<Ordering> {
        match (self, other) {
            (Scalar::F64(a), Scalar::F64(b)) => a.partial_cmp(b),
            _ => {
                let p = self.prec().max(other.prec());
                self.to_big(p).partial_cmp(&other.to_big(p))
            }
        }
    }
}

macro_rules! scalar_binop {
    ($tr:ident, $method:ident, $op:tt) => {
        impl std::ops::$tr<&Scalar> for &Scalar {
            type Output = Scalar;
            fn $method(self, rhs: &Scalar) -> Scalar {
                match (self, rhs) {
                    (Scalar::F64(a), Scalar::F64(b)) => Scalar::F64(a $op b),
                    _ => {
                        let p = self.prec().max(rhs.prec());
                        let a = self.to_big(p);
                        let b = rhs.to_big(p);
                        Scalar::Big(Float::with_val(p.bits(), &a $op &b))
                    }
                }
            }
        }

        impl std::ops::$tr<Scalar> for Scalar {
            type Output = Scalar;
            fn $method(self, rhs: Scalar) -> Scalar {
                std::ops::$tr::$method(&self, &rhs)
            }
        }

        impl std::ops::$tr<&Scalar> for Scalar {
            type Output = Scalar;
            fn $method(self, rhs: &Scalar) -> Scalar {
                std::ops::$tr::$method(&self, rhs)
            }
        }

        impl std::ops::$tr<Scalar> for &Scalar {
            type Output = Scalar;
            fn $method(self, rhs: Scalar) -> Scalar {
                std::ops::$tr::$method(self, &rhs)
            }
        }
    };
}

scalar_binop!(Add, add, +);
scalar_binop!(Sub, sub, -);
scalar_binop!(Mul, mul, *);
scalar_binop!(Div, div, /);

impl std::ops::Neg for &Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        match self {
            Scalar::F64(v) => Scalar::F64(-v),
            Scalar::Big(f) => Scalar::Big(Float::with_val(f.prec(), -f)),
        }
    }
}

impl std::ops::Neg for Scalar {
    type Output = Scalar;
    fn neg(self) -> Scalar {
        -&self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const P128: Precision = Precision(128);

    #[test]
    fn double_precision_stays_native() {
        let a = Scalar::from_f64(0.1, Precision::DOUBLE);
        let b = Scalar::from_f64(0.2, Precision::DOUBLE);
        let c = &a + &b;
        assert!(matches!(c, Scalar::F64(_)));
        assert_eq!(c.to_f64(), 0.1 + 0.2);
    }

    #[test]
    fn mixed_precision_promotes() {
        let a = Scalar::from_f64(0.5, Precision::DOUBLE);
        let b = Scalar::from_f64(0.25, P128);
        let c = &a + &b;
        assert_eq!(c.prec(), P128);
        assert_eq!(c.to_f64(), 0.75);
    }

    #[test]
    fn big_sqrt_matches_known_digits() {
        let two = Scalar::from_i64(2, P128);
        let s = two.sqrt().to_decimal_string();
        // First 30 digits of sqrt(2).
        assert!(s.starts_with("1.41421356237309504880168872420"), "{s}");
    }

    #[test]
    fn decimal_round_trip_is_exact() {
        for &v in &[0.1, 1.0 / 3.0, std::f64::consts::PI, 1e-300, -7.25] {
            let s = Scalar::F64(v).to_decimal_string();
            let back = Scalar::parse(&s, Precision::DOUBLE).unwrap();
            assert_eq!(back.to_f64().to_bits(), v.to_bits(), "{s}");
        }
        let x = Scalar::from_ratio(1, 3, P128);
        let s = x.to_decimal_string();
        let back = Scalar::parse(&s, P128).unwrap();
        assert_eq!(&back - &x, Scalar::zero(P128));
    }

    #[test]
    fn floor_and_ratio() {
        let x = Scalar::from_ratio(-7, 2, Precision::DOUBLE);
        assert_eq!(x.floor_i64(), -4);
        let y = Scalar::from_ratio(10, 4, P128);
        assert_eq!(y.floor_i64(), 2);
        assert_eq!(y.to_f64(), 2.5);
    }

    #[test]
    fn sin_2pi_agrees_with_f64_at_double() {
        for i in 0..16 {
            let x = i as f64 / 16.0;
            let s = Scalar::F64(x).sin_2pi().to_f64();
            assert!((s - (2.0 * std::f64::consts::PI * x).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn sin_2pi_big_matches_double_to_double_accuracy() {
        let x = Scalar::from_f64(0.3, P128);
        let d = (2.0 * std::f64::consts::PI * 0.3).sin();
        assert!((x.sin_2pi().to_f64() - d).abs() < 1e-14);
    }

    #[test]
    fn ln_f64_survives_underflow() {
        // 2^-2000 underflows f64 but its log must not.
        let tiny = Scalar::from_i64(2, P128).powi(-2000);
        assert_eq!(tiny.to_f64(), 0.0);
        let l = tiny.ln_f64();
        assert!((l - (-2000.0 * std::f64::consts::LN_2)).abs() < 1e-6);
    }

    #[test]
    fn epsilon_and_digits() {
        assert_eq!(Precision::DOUBLE.epsilon(), 2f64.powi(-52));
        assert_eq!(Precision::DOUBLE.decimal_digits(), 18);
        assert!(Precision::new(40).is_err());
    }

    #[test]
    fn comparison_across_representations() {
        let a = Scalar::from_ratio(1, 3, P128);
        let b = Scalar::F64(1.0 / 3.0);
        // The two roundings of 1/3 differ, and the comparison must see it.
        assert!(a != b);
        assert_eq!(a.total_cmp(&a.clone()), Ordering::Equal);
        assert!(Scalar::F64(0.25) < Scalar::F64(0.5));
    }
}
