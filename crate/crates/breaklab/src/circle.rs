//! Points and arcs on the circle R/Z.
//!
//! Positions are reduced to [0, 1) immediately after every operation.
//! Circular order is expressed through counterclockwise distances, which
//! keeps every predicate a single comparison of reduced values.

use std::fmt;

use crate::error::{LabError, Result};
use crate::scalar::{Precision, Scalar};

/// Reduce a lifted coordinate to [0, 1).
///
/// The guard after the subtraction matters: for inputs a hair below an
/// integer the difference can round to exactly 1 at working precision.
pub fn reduce_mod_one(x: &Scalar) -> Scalar {
    let one = Scalar::one(x.prec());
    let mut frac = x - &x.floor();
    if frac >= one {
        frac = &frac - &one;
    }
    if frac < Scalar::zero(x.prec()) {
        frac = &frac + &one;
    }
    frac
}

/// A point of the circle, stored as its reduced position in [0, 1).
#[derive(Clone, Debug, PartialEq, PartialOrd)]
pub struct CirclePoint {
    pos: Scalar,
}

impl CirclePoint {
    pub fn new(x: Scalar) -> CirclePoint {
        CirclePoint {
            pos: reduce_mod_one(&x),
        }
    }

    pub fn from_f64(x: f64, prec: Precision) -> CirclePoint {
        CirclePoint::new(Scalar::from_f64(x, prec))
    }

    pub fn position(&self) -> &Scalar {
        &self.pos
    }

    pub fn to_f64(&self) -> f64 {
        self.pos.to_f64()
    }

    pub fn prec(&self) -> Precision {
        self.pos.prec()
    }

    /// Counterclockwise distance from `self` to `other`, in [0, 1).
    pub fn ccw_dist(&self, other: &CirclePoint) -> Scalar {
        let d = &other.pos - &self.pos;
        if d < Scalar::zero(d.prec()) {
            &d + &Scalar::one(d.prec())
        } else {
            d
        }
    }

    /// Signed offset of `self` from `origin`, reduced into [-1/2, 1/2).
    pub fn signed_offset(&self, origin: &CirclePoint) -> Scalar {
        let d = origin.ccw_dist(self);
        let half = Scalar::from_ratio(1, 2, d.prec());
        if d >= half {
            &d - &Scalar::one(d.prec())
        } else {
            d
        }
    }

    /// Translate by a (possibly lifted) amount and reduce.
    pub fn translate(&self, delta: &Scalar) -> CirclePoint {
        CirclePoint::new(&self.pos + delta)
    }
}

impl fmt::Display for CirclePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.pos)
    }
}

/// Shorter-way distance between two circle points, in [0, 1/2].
pub fn circular_distance(a: &CirclePoint, b: &CirclePoint) -> Scalar {
    let d = a.ccw_dist(b);
    let other = &Scalar::one(d.prec()) - &d;
    d.min(&other)
}

/// Strict circular order: `b` lies on the open counterclockwise arc from
/// `a` to `c`. When `a == c` the arc is read as the full circle with the
/// point `a` removed.
pub fn ccw_ordered(a: &CirclePoint, b: &CirclePoint, c: &CirclePoint) -> bool {
    let ab = a.ccw_dist(b);
    let ac = a.ccw_dist(c);
    let zero = Scalar::zero(ab.prec());
    if ac == zero {
        return ab > zero;
    }
    ab > zero && ab < ac
}

/// A nondegenerate counterclockwise arc.
#[derive(Clone, Debug)]
pub struct Arc {
    start: CirclePoint,
    end: CirclePoint,
}

impl Arc {
    pub fn new(start: CirclePoint, end: CirclePoint) -> Result<Arc> {
        if start.pos == end.pos {
            return Err(LabError::Precision(format!(
                "degenerate arc at {start}: endpoints coincide at working precision"
            )));
        }
        Ok(Arc { start, end })
    }

    pub fn start(&self) -> &CirclePoint {
        &self.start
    }

    pub fn end(&self) -> &CirclePoint {
        &self.end
    }

    /// Arc length, in (0, 1).
    pub fn length(&self) -> Scalar {
        self.start.ccw_dist(&self.end)
    }

    /// Membership in [start, end).
    pub fn contains_half_open(&self, p: &CirclePoint) -> bool {
        self.start.ccw_dist(p) < self.length()
    }

    /// Membership in [start, end].
    pub fn contains_closed(&self, p: &CirclePoint) -> bool {
        self.start.ccw_dist(p) <= self.length()
    }

    /// Membership in (start, end).
    pub fn contains_open(&self, p: &CirclePoint) -> bool {
        let d = self.start.ccw_dist(p);
        d > Scalar::zero(d.prec()) && d < self.length()
    }

    /// The point at a given counterclockwise distance from the start.
    pub fn point_at(&self, dist: &Scalar) -> CirclePoint {
        self.start.translate(dist)
    }
}

impl fmt::Display for Arc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64) -> CirclePoint {
        CirclePoint::from_f64(x, Precision::DOUBLE)
    }

    #[test]
    fn reduction_wraps_both_directions() {
        assert_eq!(pt(1.25).to_f64(), 0.25);
        assert_eq!(pt(-0.25).to_f64(), 0.75);
        assert_eq!(pt(3.0).to_f64(), 0.0);
        assert_eq!(pt(-2.0).to_f64(), 0.0);
    }

    #[test]
    fn reduction_guard_near_integer() {
        // -2^-60 + 1 rounds to 1.0; the reduced value must re-enter [0, 1).
        let p = CirclePoint::from_f64(-8.67e-19, Precision::DOUBLE);
        assert!(p.to_f64() < 1.0);
        assert!(p.to_f64() >= 0.0);
    }

    #[test]
    fn ccw_distance_crosses_zero() {
        let d = pt(0.9).ccw_dist(&pt(0.1));
        assert!((d.to_f64() - 0.2).abs() < 1e-15);
        assert_eq!(pt(0.3).ccw_dist(&pt(0.3)).to_f64(), 0.0);
    }

    #[test]
    fn signed_offset_halves() {
        assert!((pt(0.6).signed_offset(&pt(0.5)).to_f64() - 0.1).abs() < 1e-15);
        assert!((pt(0.4).signed_offset(&pt(0.5)).to_f64() + 0.1).abs() < 1e-15);
        assert!((pt(0.1).signed_offset(&pt(0.9)).to_f64() - 0.2).abs() < 1e-15);
        // Antipode maps to the left end of [-1/2, 1/2).
        assert_eq!(pt(0.0).signed_offset(&pt(0.5)).to_f64(), -0.5);
    }

    #[test]
    fn circular_order_predicate() {
        assert!(ccw_ordered(&pt(0.8), &pt(0.9), &pt(0.1)));
        assert!(!ccw_ordered(&pt(0.8), &pt(0.2), &pt(0.1)));
        assert!(!ccw_ordered(&pt(0.8), &pt(0.8), &pt(0.1)));
        // Degenerate bounding pair reads as the full punctured circle.
        assert!(ccw_ordered(&pt(0.3), &pt(0.7), &pt(0.3)));
        assert!(!ccw_ordered(&pt(0.3), &pt(0.3), &pt(0.3)));
    }

    #[test]
    fn arcs_across_the_wrap() {
        let a = Arc::new(pt(0.9), pt(0.2)).unwrap();
        assert!((a.length().to_f64() - 0.3).abs() < 1e-15);
        assert!(a.contains_half_open(&pt(0.95)));
        assert!(a.contains_half_open(&pt(0.1)));
        assert!(a.contains_half_open(&pt(0.9)));
        assert!(!a.contains_half_open(&pt(0.2)));
        assert!(a.contains_closed(&pt(0.2)));
        assert!(!a.contains_open(&pt(0.9)));
        assert!(!a.contains_half_open(&pt(0.5)));
    }

    #[test]
    fn degenerate_arc_rejected() {
        assert!(Arc::new(pt(0.4), pt(0.4)).is_err());
    }

    #[test]
    fn point_at_distance() {
        let a = Arc::new(pt(0.9), pt(0.2)).unwrap();
        let m = a.point_at(&Scalar::from_f64(0.15, Precision::DOUBLE));
        assert!((m.to_f64() - 0.05).abs() < 1e-15);
    }
}
