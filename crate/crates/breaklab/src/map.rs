//! P-homeomorphisms of the circle: construction, evaluation, iteration.
//!
//! A map is represented by its lift F, a continuous strictly increasing
//! function with F(x+1) = F(x) + 1. Concrete families:
//!
//! - [`MobiusMap`]: a composition of one-break fractional-linear factors
//!   plus a final rigid shift. Each factor fixes its own break point, so a
//!   map with arbitrary break locations and jump ratios is assembled
//!   factor by factor, and every piece is projective.
//! - [`SineDiffeo`]: the smooth diffeomorphism x + c + a sin(2 pi x)/(2 pi),
//!   used as a conjugating change of coordinates.
//! - [`ConjugatedMap`]: psi . f . psi^{-1} for a smooth psi, which moves the
//!   break points of f without changing their jump ratios.

use serde::{Deserialize, Serialize};

use crate::circle::CirclePoint;
use crate::error::{LabError, Result};
use crate::scalar::{Precision, Scalar};

/// Which one-sided limit to take at a point.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Side {
    Left,
    Right,
}

/// A declared break point: location and jump ratio sigma = Df-/Df+.
#[derive(Clone, Debug)]
pub struct BreakSpec {
    pub location: CirclePoint,
    pub jump: Scalar,
}

/// Interface shared by every map family.
///
/// Only lifts, one-sided derivatives and the break list are
/// family-specific; iteration, jump bookkeeping and the variation of
/// log Df are provided generically.
pub trait CircleMap {
    fn precision(&self) -> Precision;

    /// F(x) for any real x, with F(x+1) = F(x) + 1.
    fn eval_lift(&self, x: &Scalar) -> Scalar;

    /// F^{-1}(y), the exact analytic (or guarded-Newton) inverse lift.
    fn eval_lift_inverse(&self, y: &Scalar) -> Scalar;

    /// One-sided derivative DF at a circle point.
    fn deriv_one_sided(&self, x: &CirclePoint, side: Side) -> Scalar;

    /// One-sided second derivative D2F at a circle point.
    fn deriv2_one_sided(&self, x: &CirclePoint, side: Side) -> Scalar;

    /// Declared break points in circular order.
    fn breaks(&self) -> &[BreakSpec];

    /// Largest |n| accepted by [`CircleMap::iterate`].
    fn orbit_budget(&self) -> u64 {
        DEFAULT_ORBIT_BUDGET
    }

    fn apply(&self, p: &CirclePoint) -> CirclePoint {
        CirclePoint::new(self.eval_lift(p.position()))
    }

    fn apply_inverse(&self, p: &CirclePoint) -> CirclePoint {
        CirclePoint::new(self.eval_lift_inverse(p.position()))
    }

    /// Circle image together with the integer wrap of the lift, so that
    /// rotation-number accumulators never store large lifted values.
    fn apply_tracked(&self, p: &CirclePoint) -> (CirclePoint, i64) {
        let lifted = self.eval_lift(p.position());
        let wrap = lifted.floor_i64();
        (CirclePoint::new(lifted), wrap)
    }

    /// f^n for n >= 0, f^{-|n|} via the inverse lift for n < 0.
    fn iterate(&self, p: &CirclePoint, n: i64) -> Result<CirclePoint> {
        if n.unsigned_abs() > self.orbit_budget() {
            return Err(LabError::BudgetExceeded(format!(
                "iterate called with n = {n}, budget {}",
                self.orbit_budget()
            )));
        }
        let mut q = p.clone();
        if n >= 0 {
            for _ in 0..n {
                q = self.apply(&q);
            }
        } else {
            for _ in 0..n.unsigned_abs() {
                q = self.apply_inverse(&q);
            }
        }
        Ok(q)
    }

    /// Product of the declared jump ratios; 1 for break-free maps.
    fn total_jump(&self) -> Scalar {
        let mut prod = Scalar::one(self.precision());
        for b in self.breaks() {
            prod = &prod * &b.jump;
        }
        prod
    }

    /// Total variation of log DF over one period.
    ///
    /// On each continuity interval DF is split into monotone segments at
    /// the sign changes of D2F (located by scan and bisection), and the
    /// variation is summed segment by segment from one-sided endpoint
    /// derivatives; every break adds |log sigma|.
    fn variation_log_df(&self) -> Scalar {
        let prec = self.precision();
        let mut total = Scalar::zero(prec);
        for b in self.breaks() {
            total = &total + &b.jump.ln().abs();
        }

        let endpoints: Vec<Scalar> = if self.breaks().is_empty() {
            vec![Scalar::zero(prec), Scalar::one(prec)]
        } else {
            let mut e: Vec<Scalar> = self
                .breaks()
                .iter()
                .map(|b| b.location.position().clone())
                .collect();
            e.sort_by(|a, b| a.total_cmp(b));
            let first = e[0].clone();
            e.push(&first + &Scalar::one(prec));
            e
        };

        for pair in endpoints.windows(2) {
            total = &total + &self.variation_on_interval(&pair[0], &pair[1]);
        }
        total
    }

    /// Variation of log DF on one continuity interval (a, b) of the lift.
    #[doc(hidden)]
    fn variation_on_interval(&self, a: &Scalar, b: &Scalar) -> Scalar {
        let prec = self.precision();
        let len = b - a;
        let d2_at = |t: &Scalar| -> Scalar {
            let p = CirclePoint::new(t.clone());
            // Interior points only, so either side works; Right matches the
            // half-open piece convention.
            self.deriv2_one_sided(&p, Side::Right)
        };

        // Sign scan of D2F on an interior grid, then bisection on each
        // bracketed root to split DF into monotone segments.
        const SCAN: usize = 512;
        let mut cuts: Vec<Scalar> = vec![a.clone()];
        let mut prev_t: Option<Scalar> = None;
        let mut prev_sign = 0i8;
        for i in 1..SCAN {
            let t = a + &(&len * &Scalar::from_ratio(i as i64, SCAN as i64, prec));
            let s = sign_of(&d2_at(&t));
            if let Some(pt) = &prev_t {
                if prev_sign != 0 && s != 0 && s != prev_sign {
                    cuts.push(bisect_root(&d2_at, pt, &t, prec));
                }
            }
            if s != 0 {
                prev_sign = s;
            }
            prev_t = Some(t);
        }
        cuts.push(b.clone());

        let mut var = Scalar::zero(prec);
        for seg in cuts.windows(2) {
            let lo_side = CirclePoint::new(seg[0].clone());
            let hi_side = CirclePoint::new(seg[1].clone());
            let d_lo = self.deriv_one_sided(&lo_side, Side::Right).ln();
            let d_hi = self.deriv_one_sided(&hi_side, Side::Left).ln();
            var = &var + &(&d_hi - &d_lo).abs();
        }
        var
    }

    /// Measured range of DF over a uniform sample of the circle, reported
    /// because derivative bounds are otherwise only existential.
    fn df_range(&self, samples: usize) -> (Scalar, Scalar) {
        let prec = self.precision();
        let mut lo: Option<Scalar> = None;
        let mut hi: Option<Scalar> = None;
        for i in 0..samples {
            let p = CirclePoint::new(Scalar::from_ratio(i as i64, samples as i64, prec));
            for side in [Side::Left, Side::Right] {
                let d = self.deriv_one_sided(&p, side);
                lo = Some(match lo {
                    Some(l) => l.min(&d),
                    None => d.clone(),
                });
                hi = Some(match hi {
                    Some(h) => h.max(&d),
                    None => d,
                });
            }
        }
        (lo.unwrap(), hi.unwrap())
    }
}

pub const DEFAULT_ORBIT_BUDGET: u64 = 50_000_000;

fn sign_of(x: &Scalar) -> i8 {
    let zero = Scalar::zero(x.prec());
    if *x > zero {
        1
    } else if *x < zero {
        -1
    } else {
        0
    }
}

fn bisect_root(f: &dyn Fn(&Scalar) -> Scalar, lo: &Scalar, hi: &Scalar, prec: Precision) -> Scalar {
    let mut lo = lo.clone();
    let mut hi = hi.clone();
    let s_lo = sign_of(&f(&lo));
    let half = Scalar::from_ratio(1, 2, prec);
    for _ in 0..(prec.bits() + 8) {
        let mid = &(&lo + &hi) * &half;
        if sign_of(&f(&mid)) == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    &(&lo + &hi) * &half
}

/// Split a lifted coordinate relative to an anchor into an integer branch
/// and a fractional part in [0, 1).
fn split_branch(u: &Scalar) -> (Scalar, Scalar) {
    let prec = u.prec();
    let mut k = u.floor();
    let mut w = u - &k;
    let one = Scalar::one(prec);
    if w >= one {
        k = &k + &one;
        w = &w - &one;
    }
    if w < Scalar::zero(prec) {
        k = &k - &one;
        w = &w + &one;
    }
    (k, w)
}

/// One fractional-linear factor fixing its break point `b`.
///
/// On the fundamental branch w = x - b in [0, 1) the factor acts as
/// w -> a w / (1 + (a - 1) w), which fixes 0 and 1 and has derivative `a`
/// at 0 and 1/a at 1. The jump ratio at b is therefore 1/a^2.
#[derive(Clone, Debug)]
struct MobiusFactor {
    b: Scalar,
    a: Scalar,
}

impl MobiusFactor {
    fn n_eval(&self, w: &Scalar) -> Scalar {
        let one = Scalar::one(w.prec());
        let num = &self.a * w;
        let den = &one + &(&(&self.a - &one) * w);
        &num / &den
    }

    fn n_eval_inv(&self, w: &Scalar) -> Scalar {
        let one = Scalar::one(w.prec());
        let inv_a = one.clone() / &self.a;
        let num = &inv_a * w;
        let den = &one + &(&(&inv_a - &one) * w);
        &num / &den
    }

    fn eval(&self, x: &Scalar) -> Scalar {
        let (k, w) = split_branch(&(x - &self.b));
        &(&self.b + &k) + &self.n_eval(&w)
    }

    fn eval_inv(&self, y: &Scalar) -> Scalar {
        let (k, w) = split_branch(&(y - &self.b));
        &(&self.b + &k) + &self.n_eval_inv(&w)
    }

    /// First and second derivative at the branch coordinate w, resolving
    /// the branch at the break itself according to `side`.
    fn jet(&self, w: &Scalar, side: Side) -> (Scalar, Scalar) {
        let prec = w.prec();
        let one = Scalar::one(prec);
        let snap = Scalar::from_f64(16.0 * prec.epsilon(), prec);
        let at_break = w < &snap || w > &(&one - &snap);
        let w_eff = if at_break {
            match side {
                Side::Right => Scalar::zero(prec),
                Side::Left => one.clone(),
            }
        } else {
            w.clone()
        };
        let den = &one + &(&(&self.a - &one) * &w_eff);
        let d1 = &self.a / &(&den * &den);
        let two = Scalar::from_i64(2, prec);
        let d2 = -&(&(&(&two * &self.a) * &(&self.a - &one)) / &(&(&den * &den) * &den));
        (d1, d2)
    }
}

/// Piecewise fractional-linear P-homeomorphism.
///
/// Built as shift + F_m . ... . F_1 where factor i fixes the image of the
/// i-th declared break under the preceding factors. Each declared break is
/// then a break of the composite with exactly the declared jump ratio, and
/// no other break points appear.
#[derive(Clone, Debug)]
pub struct MobiusMap {
    factors: Vec<MobiusFactor>,
    shift: Scalar,
    breaks: Vec<BreakSpec>,
    prec: Precision,
    orbit_budget: u64,
}

/// Construct a [`MobiusMap`] from declared break data.
///
/// Rejects coincident break locations and jump ratios that are not
/// positive or equal one. Construction verifies the realized one-sided
/// derivative ratio at every declared break against the declared jump.
pub fn make_piecewise_mobius(breaks: Vec<BreakSpec>, lift_shift: Scalar) -> Result<MobiusMap> {
    let prec = lift_shift.prec();
    let mut sorted = breaks;
    sorted.sort_by(|x, y| x.location.position().total_cmp(y.location.position()));
    for pair in sorted.windows(2) {
        if pair[0].location.position() == pair[1].location.position() {
            return Err(LabError::InvalidSpec(format!(
                "coincident break locations at {}",
                pair[0].location
            )));
        }
    }
    let one = Scalar::one(prec);
    for b in &sorted {
        if b.jump <= Scalar::zero(prec) {
            return Err(LabError::InvalidSpec(format!(
                "jump ratio must be positive, got {} at {}",
                b.jump, b.location
            )));
        }
        if b.jump == one {
            return Err(LabError::InvalidSpec(format!(
                "jump ratio 1 at {} is not a break point",
                b.location
            )));
        }
    }

    // Factor i fixes the image of break i under factors 1..i-1, so the
    // composite breaks exactly at the declared locations.
    let mut factors: Vec<MobiusFactor> = Vec::with_capacity(sorted.len());
    for b in &sorted {
        let mut pos = b.location.position().clone();
        for f in &factors {
            pos = f.eval(&pos);
        }
        let a = &one / &b.jump.sqrt();
        factors.push(MobiusFactor {
            b: crate::circle::reduce_mod_one(&pos),
            a,
        });
    }

    let map = MobiusMap {
        factors,
        shift: lift_shift,
        breaks: sorted,
        prec,
        orbit_budget: DEFAULT_ORBIT_BUDGET,
    };

    // Realized-jump audit: the chain construction must reproduce each
    // declared ratio to rounding accuracy.
    let tol = Scalar::from_f64(1e-10_f64.max(64.0 * prec.epsilon()), prec);
    for b in map.breaks.clone() {
        let left = map.deriv_one_sided(&b.location, Side::Left);
        let right = map.deriv_one_sided(&b.location, Side::Right);
        let realized = &left / &right;
        let rel = (&(&realized - &b.jump) / &b.jump).abs();
        if rel > tol {
            return Err(LabError::InvalidSpec(format!(
                "break chain failed to close: declared jump {} at {}, realized {}",
                b.jump, b.location, realized
            )));
        }
    }
    Ok(map)
}

impl MobiusMap {
    /// Rigid rotation by `shift`.
    pub fn rotation(shift: Scalar) -> MobiusMap {
        make_piecewise_mobius(Vec::new(), shift).expect("rotation construction cannot fail")
    }

    pub fn lift_shift(&self) -> &Scalar {
        &self.shift
    }

    /// Same break data with a different lift shift.
    pub fn with_lift_shift(&self, shift: Scalar) -> MobiusMap {
        MobiusMap {
            factors: self.factors.clone(),
            shift,
            breaks: self.breaks.clone(),
            prec: self.prec,
            orbit_budget: self.orbit_budget,
        }
    }

    pub fn with_orbit_budget(mut self, budget: u64) -> MobiusMap {
        self.orbit_budget = budget;
        self
    }

    /// Derivative jet (DF, D2F) via the chain rule across factors.
    fn jet(&self, x: &CirclePoint, side: Side) -> (Scalar, Scalar) {
        let prec = self.prec;
        let mut pos = x.position().clone();
        let mut d1 = Scalar::one(prec);
        let mut d2 = Scalar::zero(prec);
        for f in &self.factors {
            let (_, w) = split_branch(&(&pos - &f.b));
            let (f1, f2) = f.jet(&w, side);
            // (g.f)'' = g''(f) f'^2 + g'(f) f''
            d2 = &(&f2 * &(&d1 * &d1)) + &(&f1 * &d2);
            d1 = &f1 * &d1;
            pos = f.eval(&pos);
        }
        (d1, d2)
    }
}

impl CircleMap for MobiusMap {
    fn precision(&self) -> Precision {
        self.prec
    }

    fn eval_lift(&self, x: &Scalar) -> Scalar {
        let mut y = x.clone();
        for f in &self.factors {
            y = f.eval(&y);
        }
        &y + &self.shift
    }

    fn eval_lift_inverse(&self, y: &Scalar) -> Scalar {
        let mut x = y - &self.shift;
        for f in self.factors.iter().rev() {
            x = f.eval_inv(&x);
        }
        x
    }

    fn deriv_one_sided(&self, x: &CirclePoint, side: Side) -> Scalar {
        self.jet(x, side).0
    }

    fn deriv2_one_sided(&self, x: &CirclePoint, side: Side) -> Scalar {
        self.jet(x, side).1
    }

    fn breaks(&self) -> &[BreakSpec] {
        &self.breaks
    }

    fn orbit_budget(&self) -> u64 {
        self.orbit_budget
    }
}

/// The smooth circle diffeomorphism psi(x) = x + phase + a sin(2 pi x)/(2 pi).
///
/// Requires |a| < 1 so that the derivative 1 + a cos(2 pi x) stays positive.
#[derive(Clone, Debug)]
pub struct SineDiffeo {
    amplitude: Scalar,
    phase: Scalar,
    prec: Precision,
}

impl SineDiffeo {
    pub fn new(amplitude: Scalar, phase: Scalar) -> Result<SineDiffeo> {
        let prec = amplitude.prec().max(phase.prec());
        let one = Scalar::one(prec);
        if amplitude.abs() >= one {
            return Err(LabError::InvalidSpec(format!(
                "sine amplitude must satisfy |a| < 1, got {amplitude}"
            )));
        }
        Ok(SineDiffeo {
            amplitude,
            phase,
            prec,
        })
    }

    pub fn amplitude(&self) -> &Scalar {
        &self.amplitude
    }
}

impl CircleMap for SineDiffeo {
    fn precision(&self) -> Precision {
        self.prec
    }

    fn eval_lift(&self, x: &Scalar) -> Scalar {
        let scaled = &(&self.amplitude * &x.sin_2pi()) / &two_pi_scalar(self.prec);
        &(x + &self.phase) + &scaled
    }

    fn eval_lift_inverse(&self, y: &Scalar) -> Scalar {
        // Guarded Newton on the monotone lift; the bracket is exact because
        // |psi(x) - x - phase| <= |a|/(2 pi).
        let prec = self.prec;
        let slack = &self.amplitude.abs() / &two_pi_scalar(prec);
        let center = y - &self.phase;
        let mut lo = &center - &slack;
        let mut hi = &center + &slack;
        let tol = &Scalar::from_f64(4.0 * prec.epsilon(), prec)
            * &Scalar::one(prec).max(&y.abs());
        let half = Scalar::from_ratio(1, 2, prec);
        let mut x = &(&lo + &hi) * &half;
        for _ in 0..(2 * prec.bits() + 16) {
            let fx = self.eval_lift(&x);
            let err = &fx - y;
            if err.abs() <= tol {
                return x;
            }
            if err < Scalar::zero(prec) {
                lo = x.clone();
            } else {
                hi = x.clone();
            }
            let d = &Scalar::one(prec) + &(&self.amplitude * &x.cos_2pi());
            let step = &err / &d;
            let candidate = &x - &step;
            x = if candidate > lo && candidate < hi {
                candidate
            } else {
                &(&lo + &hi) * &half
            };
        }
        x
    }

    fn deriv_one_sided(&self, x: &CirclePoint, _side: Side) -> Scalar {
        &Scalar::one(self.prec) + &(&self.amplitude * &x.position().cos_2pi())
    }

    fn deriv2_one_sided(&self, x: &CirclePoint, _side: Side) -> Scalar {
        let minus = -&(&self.amplitude * &x.position().sin_2pi());
        &minus * &two_pi_scalar(self.prec)
    }

    fn breaks(&self) -> &[BreakSpec] {
        &[]
    }
}

fn two_pi_scalar(prec: Precision) -> Scalar {
    if prec == Precision::DOUBLE {
        Scalar::F64(2.0 * std::f64::consts::PI)
    } else {
        let wp = prec.bits() + 32;
        let pi = rug::Float::with_val(wp, rug::float::Constant::Pi);
        Scalar::Big(rug::Float::with_val(prec.bits(), pi * 2i32))
    }
}

/// psi . inner . psi^{-1}: the inner map in smoothly moved coordinates.
///
/// Break points move to psi(b); jump ratios are unchanged because psi is
/// C^2. The conjugated map has the same rotation number as the inner map.
#[derive(Clone, Debug)]
pub struct ConjugatedMap<M: CircleMap> {
    psi: SineDiffeo,
    inner: M,
    breaks: Vec<BreakSpec>,
}

impl<M: CircleMap> ConjugatedMap<M> {
    pub fn new(psi: SineDiffeo, inner: M) -> ConjugatedMap<M> {
        let breaks = inner
            .breaks()
            .iter()
            .map(|b| BreakSpec {
                location: psi.apply(&b.location),
                jump: b.jump.clone(),
            })
            .collect();
        ConjugatedMap { psi, inner, breaks }
    }

    pub fn conjugator(&self) -> &SineDiffeo {
        &self.psi
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: CircleMap> CircleMap for ConjugatedMap<M> {
    fn precision(&self) -> Precision {
        self.inner.precision()
    }

    fn eval_lift(&self, x: &Scalar) -> Scalar {
        self.psi
            .eval_lift(&self.inner.eval_lift(&self.psi.eval_lift_inverse(x)))
    }

    fn eval_lift_inverse(&self, y: &Scalar) -> Scalar {
        self.psi
            .eval_lift(&self.inner.eval_lift_inverse(&self.psi.eval_lift_inverse(y)))
    }

    fn deriv_one_sided(&self, x: &CirclePoint, side: Side) -> Scalar {
        let u = CirclePoint::new(self.psi.eval_lift_inverse(x.position()));
        let v = self.inner.apply(&u);
        let du = self.psi.deriv_one_sided(&u, side);
        let dm = self.inner.deriv_one_sided(&u, side);
        let dv = self.psi.deriv_one_sided(&v, side);
        &(&dv * &dm) / &du
    }

    fn deriv2_one_sided(&self, x: &CirclePoint, side: Side) -> Scalar {
        // Chain of jets through psi^{-1}, inner, psi.
        let prec = self.precision();
        let u = CirclePoint::new(self.psi.eval_lift_inverse(x.position()));
        let v = self.inner.apply(&u);

        let pu1 = self.psi.deriv_one_sided(&u, side);
        let pu2 = self.psi.deriv2_one_sided(&u, side);
        // Inverse-function jet at x.
        let d1 = Scalar::one(prec) / &pu1;
        let d2 = -&(&pu2 / &(&(&pu1 * &pu1) * &pu1));

        let m1 = self.inner.deriv_one_sided(&u, side);
        let m2 = self.inner.deriv2_one_sided(&u, side);
        let e2 = &(&m2 * &(&d1 * &d1)) + &(&m1 * &d2);
        let e1 = &m1 * &d1;

        let pv1 = self.psi.deriv_one_sided(&v, side);
        let pv2 = self.psi.deriv2_one_sided(&v, side);
        &(&pv2 * &(&e1 * &e1)) + &(&pv1 * &e2)
    }

    fn breaks(&self) -> &[BreakSpec] {
        &self.breaks
    }

    fn orbit_budget(&self) -> u64 {
        self.inner.orbit_budget()
    }
}

/// Serialized map description.
///
/// `family` is "mobius" for a plain piecewise fractional-linear map, or
/// "psi_mobius" for such a map conjugated by a sine diffeomorphism with
/// the given amplitude and phase. Numeric fields are JSON numbers, which
/// round-trip bit-exactly at 53-bit precision.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MapSpec {
    pub breaks: Vec<BreakSpecJson>,
    pub lift_shift: f64,
    pub family: String,
    #[serde(default = "default_precision_bits")]
    pub precision_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_phase: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BreakSpecJson {
    pub location: f64,
    pub jump: f64,
}

fn default_precision_bits() -> u32 {
    53
}

impl MapSpec {
    pub fn mobius(breaks: Vec<(f64, f64)>, lift_shift: f64, precision_bits: u32) -> MapSpec {
        MapSpec {
            breaks: breaks
                .into_iter()
                .map(|(location, jump)| BreakSpecJson { location, jump })
                .collect(),
            lift_shift,
            family: "mobius".to_owned(),
            precision_bits,
            psi_amplitude: None,
            psi_phase: None,
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::new(self.precision_bits)
    }

    pub fn with_lift_shift(&self, lift_shift: f64) -> MapSpec {
        MapSpec {
            lift_shift,
            ..self.clone()
        }
    }

    /// Build the described map.
    pub fn build(&self) -> Result<Box<dyn CircleMap>> {
        let prec = self.precision()?;
        let breaks = self
            .breaks
            .iter()
            .map(|b| BreakSpec {
                location: CirclePoint::from_f64(b.location, prec),
                jump: Scalar::from_f64(b.jump, prec),
            })
            .collect();
        let mobius = make_piecewise_mobius(breaks, Scalar::from_f64(self.lift_shift, prec))?;
        match self.family.as_str() {
            "mobius" => {
                if self.psi_amplitude.is_some() || self.psi_phase.is_some() {
                    return Err(LabError::InvalidSpec(
                        "psi parameters are only valid for family \"psi_mobius\"".to_owned(),
                    ));
                }
                Ok(Box::new(mobius))
            }
            "psi_mobius" => {
                let a = self.psi_amplitude.ok_or_else(|| {
                    LabError::InvalidSpec(
                        "family \"psi_mobius\" requires psi_amplitude".to_owned(),
                    )
                })?;
                let phase = self.psi_phase.unwrap_or(0.0);
                let psi = SineDiffeo::new(
                    Scalar::from_f64(a, prec),
                    Scalar::from_f64(phase, prec),
                )?;
                Ok(Box::new(ConjugatedMap::new(psi, mobius)))
            }
            other => Err(LabError::InvalidSpec(format!("unknown map family {other:?}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<MapSpec> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
