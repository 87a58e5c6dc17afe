//! Rotation numbers, continued fractions and parameter tuning.
//!
//! The central routine is a closest-return scan of a single forward orbit.
//! Partial quotients are recovered purely from circular order: level one
//! counts steps until the orbit first passes the base point, and each later
//! level counts how many q_n-steps keep the iterate on the side of the base
//! point opposite to x_{q_n}. The scan also yields rigorous rotation-number
//! brackets, since |rho - p_n/q_n| < 1/q_n^2 for the convergents it finds.

use crate::circle::CirclePoint;
use crate::error::{LabError, Result};
use crate::map::CircleMap;
use crate::scalar::{Precision, Scalar};

/// Partial quotients and convergents of a continued fraction.
///
/// Index n = 0 is the seed convergent p_0/q_0 = 0/1; the recurrences
/// q_{n+1} = k_{n+1} q_n + q_{n-1} and the same for p hold exactly in
/// integer arithmetic, with q_1 = k_1 and p_1 = 1.
#[derive(Clone, Debug)]
pub struct ContinuedFractionData {
    pub quotients: Vec<u64>,
    pub p: Vec<i64>,
    pub q: Vec<i64>,
    /// True when the expansion terminated exactly at working precision.
    pub rational: bool,
    pub iterations_used: u64,
}

impl ContinuedFractionData {
    fn from_quotients(quotients: Vec<u64>, rational: bool, iterations_used: u64) -> Result<Self> {
        let mut p: Vec<i64> = vec![0];
        let mut q: Vec<i64> = vec![1];
        let mut p_prev = 1i64; // p_{-1}
        let mut q_prev = 0i64; // q_{-1}
        for &k in &quotients {
            let k = i64::try_from(k)
                .map_err(|_| LabError::Precision("partial quotient exceeds i64".into()))?;
            let pn = *p.last().unwrap();
            let qn = *q.last().unwrap();
            let p_next = k
                .checked_mul(pn)
                .and_then(|v| v.checked_add(p_prev))
                .ok_or_else(|| LabError::Precision("convergent numerator overflow".into()))?;
            let q_next = k
                .checked_mul(qn)
                .and_then(|v| v.checked_add(q_prev))
                .ok_or_else(|| LabError::Precision("convergent denominator overflow".into()))?;
            p_prev = pn;
            q_prev = qn;
            p.push(p_next);
            q.push(q_next);
        }
        Ok(ContinuedFractionData {
            quotients,
            p,
            q,
            rational,
            iterations_used,
        })
    }

    /// Number of recovered partial quotients.
    pub fn depth(&self) -> usize {
        self.quotients.len()
    }

    /// Convergent (p_n, q_n); n = 0 is the seed 0/1.
    pub fn convergent(&self, n: usize) -> (i64, i64) {
        (self.p[n], self.q[n])
    }

    pub fn convergent_value(&self, n: usize, prec: Precision) -> Scalar {
        Scalar::from_ratio(self.p[n], self.q[n], prec)
    }

    /// Exact integer check of both recurrences.
    pub fn verify_recurrence(&self) -> bool {
        if self.p.len() != self.quotients.len() + 1 || self.q.len() != self.p.len() {
            return false;
        }
        let mut p_prev = 1i64;
        let mut q_prev = 0i64;
        for (n, &k) in self.quotients.iter().enumerate() {
            let expect_p = k as i64 * self.p[n] + p_prev;
            let expect_q = k as i64 * self.q[n] + q_prev;
            if expect_p != self.p[n + 1] || expect_q != self.q[n + 1] {
                return false;
            }
            p_prev = self.p[n];
            q_prev = self.q[n];
        }
        true
    }
}

/// Rotation-number estimate with a rigorous error bound.
#[derive(Clone, Debug)]
pub struct RotationEstimate {
    pub value: Scalar,
    pub error_bound: Scalar,
    pub iterations_used: u64,
    /// True when the orbit returned exactly to the base point, so the value
    /// is the exact rational p/q at working precision.
    pub rational: bool,
}

#[derive(Clone, Debug)]
struct ReturnRecord {
    index: i64,
    point: CirclePoint,
    wraps: i64,
}

#[derive(Debug)]
struct OrbitScan {
    quotients: Vec<u64>,
    returns: Vec<ReturnRecord>,
    rational: Option<ReturnRecord>,
    /// Last march point of a budget-interrupted level, with the step size
    /// q_n of that level. It is a semiconvergent return: the true rotation
    /// number lies between its value and the previous convergent, which
    /// gives a sharp bracket even inside mode-locking plateaus.
    partial: Option<(ReturnRecord, i64)>,
    /// Forward Birkhoff state (displacement, steps) when not even the first
    /// closest return fit in the budget.
    birkhoff: Option<(Scalar, u64)>,
    /// Set when side alternation became unresolvable at working precision.
    precision_exhausted: bool,
    iterations_used: u64,
}

fn lifted_displacement(point: &CirclePoint, wraps: i64, x0: &CirclePoint) -> Scalar {
    let prec = point.prec();
    &(&Scalar::from_i64(wraps, prec) + point.position()) - x0.position()
}

fn nearest_integer(d: &Scalar) -> i64 {
    (d + &Scalar::from_ratio(1, 2, d.prec())).floor_i64()
}

/// Closest-return scan of the forward orbit of `x0`.
///
/// `budget` caps the number of map applications, counting the replays each
/// level performs from the previous return.
fn scan_returns(map: &dyn CircleMap, x0: &CirclePoint, depth: usize, budget: u64) -> OrbitScan {
    let prec = x0.prec();
    let tie = Scalar::from_f64(32.0 * prec.epsilon(), prec);
    let mut its: u64 = 0;
    let mut scan = OrbitScan {
        quotients: Vec::new(),
        returns: Vec::new(),
        rational: None,
        partial: None,
        birkhoff: None,
        precision_exhausted: false,
        iterations_used: 0,
    };
    if depth == 0 {
        return scan;
    }

    // Level one: walk forward until the orbit passes x0 counterclockwise.
    let mut pk = x0.clone();
    let mut wk = 0i64;
    let mut k = 0i64;
    let mut first: Option<ReturnRecord> = None;
    loop {
        if its + 1 > budget {
            scan.birkhoff = Some((lifted_displacement(&pk, wk, x0), k as u64));
            scan.iterations_used = its;
            return scan;
        }
        let (nxt, dw) = map.apply_tracked(&pk);
        its += 1;
        let wn = wk + dw;
        if k == 0 {
            first = Some(ReturnRecord {
                index: 1,
                point: nxt.clone(),
                wraps: wn,
            });
        }
        if nxt.signed_offset(x0).abs() <= tie {
            scan.rational = Some(ReturnRecord {
                index: k + 1,
                point: nxt,
                wraps: wn,
            });
            scan.iterations_used = its;
            return scan;
        }
        if k >= 1 {
            let d_base = pk.ccw_dist(x0);
            let d_step = pk.ccw_dist(&nxt);
            if d_base <= d_step {
                scan.quotients.push(k as u64);
                scan.returns.push(first.clone().unwrap());
                scan.returns.push(ReturnRecord {
                    index: k,
                    point: pk,
                    wraps: wk,
                });
                break;
            }
        }
        pk = nxt;
        wk = wn;
        k += 1;
    }

    // Levels two and up: from the previous return, step by f^{q_n} until the
    // step arc sweeps past x0. Sides of closest returns alternate, with the
    // level-one return approaching counterclockwise, so x_{q_n} lies right of
    // x0 exactly at even n. The side is tracked structurally instead of by
    // the sign of the offset: an early return arc can exceed a half turn
    // (conjugating by a strongly distorting map stretches it), which would
    // flip the sign-based reading even though the orbit combinatorics are
    // unchanged.
    while scan.quotients.len() < depth {
        let n = scan.quotients.len();
        let q_cur = scan.returns[n].index;
        let side_right = n % 2 == 0;
        let mut c = scan.returns[n - 1].clone();
        let mut count: u64 = 0;
        loop {
            if its + q_cur as u64 > budget {
                if count >= 1 {
                    scan.partial = Some((c, q_cur));
                }
                scan.iterations_used = its;
                return scan;
            }
            let mut p = c.point.clone();
            let mut w = c.wraps;
            for _ in 0..q_cur {
                let (np, dw) = map.apply_tracked(&p);
                p = np;
                w += dw;
            }
            its += q_cur as u64;
            let s = p.signed_offset(x0);
            if s.abs() <= tie {
                scan.rational = Some(ReturnRecord {
                    index: c.index + q_cur,
                    point: p,
                    wraps: w,
                });
                scan.iterations_used = its;
                return scan;
            }
            // The marchers close in on x0 from the side opposite x_{q_n}:
            // counterclockwise from the left when x_{q_n} is right of x0,
            // clockwise from the right otherwise. Crossing to the x_{q_n}
            // side means the directed step arc from c to p contains x0.
            let crossed = if side_right {
                c.point.ccw_dist(x0) <= c.point.ccw_dist(&p)
            } else {
                p.ccw_dist(x0) < p.ccw_dist(&c.point)
            };
            if crossed {
                break;
            }
            count += 1;
            c = ReturnRecord {
                index: c.index + q_cur,
                point: p,
                wraps: w,
            };
        }
        if count == 0 {
            // A q_n-step landed on the wrong side immediately; the orbit can
            // no longer resolve the alternation at this precision.
            scan.precision_exhausted = true;
            scan.iterations_used = its;
            return scan;
        }
        scan.quotients.push(count);
        scan.returns.push(c);
    }
    scan.iterations_used = its;
    scan
}

/// Recover partial quotients from the closest returns of the orbit of `x0`.
///
/// Errors with a rational-rotation diagnostic if the orbit returns exactly
/// to `x0` at working precision, and with a precision diagnostic if side
/// alternation becomes unresolvable. Depth is data-dependent: recovery
/// stops once the next level no longer fits the budget.
pub fn closest_return_quotients(
    map: &dyn CircleMap,
    x0: &CirclePoint,
    depth: usize,
    budget: u64,
) -> Result<ContinuedFractionData> {
    let scan = scan_returns(map, x0, depth, budget);
    if let Some(hit) = &scan.rational {
        let d = lifted_displacement(&hit.point, hit.wraps, x0);
        let p = nearest_integer(&d);
        return Err(LabError::RationalRotation(format!(
            "orbit returned to the base point after {} steps: rho = {}/{} at working precision",
            hit.index, p, hit.index
        )));
    }
    if scan.precision_exhausted {
        return Err(LabError::Precision(format!(
            "closest-return side alternation unresolvable after {} quotients; raise mantissa bits",
            scan.quotients.len()
        )));
    }
    ContinuedFractionData::from_quotients(scan.quotients, false, scan.iterations_used)
}

/// Estimate the rotation number of `map` from the orbit of 0.
///
/// The estimate is the last closest-return convergent with its 1/q^2
/// bracket plus an allowance for orbit rounding; when no return fits the
/// budget the Birkhoff average with its 1/n bound is used instead. Exact
/// returns yield the rational value with the tie tolerance as the bound.
pub fn rotation_number(map: &dyn CircleMap, budget: u64) -> Result<RotationEstimate> {
    let est = rotation_number_lifted(map, budget)?;
    Ok(RotationEstimate {
        value: crate::circle::reduce_mod_one(&est.value),
        ..est
    })
}

/// Same as [`rotation_number`] but without reducing mod 1, so the value is
/// the mean lift displacement. Monotone in the lift shift, which makes it
/// the right comparator for tuning.
pub fn rotation_number_lifted(map: &dyn CircleMap, budget: u64) -> Result<RotationEstimate> {
    if budget < 2 {
        return Err(LabError::InvalidConfig(format!(
            "rotation-number budget must be at least 2, got {budget}"
        )));
    }
    let prec = map.precision();
    let x0 = CirclePoint::new(Scalar::zero(prec));
    let scan = scan_returns(map, &x0, usize::MAX >> 1, budget);
    let rounding = Scalar::from_f64(4.0 * scan.iterations_used as f64 * prec.epsilon(), prec);

    if let Some(hit) = &scan.rational {
        let d = lifted_displacement(&hit.point, hit.wraps, &x0);
        let p = nearest_integer(&d);
        return Ok(RotationEstimate {
            value: Scalar::from_ratio(p, hit.index, prec),
            error_bound: &Scalar::from_f64(64.0 * prec.epsilon(), prec) + &rounding,
            iterations_used: scan.iterations_used,
            rational: true,
        });
    }
    if let Some((rec, q_step)) = &scan.partial {
        // Semiconvergent bracket: rho lies between the march point's value
        // and the convergent p_n/q_n it marches by, which are a Farey pair.
        let d = lifted_displacement(&rec.point, rec.wraps, &x0);
        let p = nearest_integer(&d);
        let denom = rec
            .index
            .checked_mul(*q_step)
            .map(|v| Scalar::from_ratio(1, v, prec))
            .unwrap_or_else(|| Scalar::zero(prec));
        return Ok(RotationEstimate {
            value: Scalar::from_ratio(p, rec.index, prec),
            error_bound: &denom + &rounding,
            iterations_used: scan.iterations_used,
            rational: false,
        });
    }
    if scan.returns.len() >= 2 {
        let last = &scan.returns[scan.returns.len() - 1];
        let prev = &scan.returns[scan.returns.len() - 2];
        let d = lifted_displacement(&last.point, last.wraps, &x0);
        let p = nearest_integer(&d);
        let q = last.index;
        // |rho - p_n/q_n| < 1/(q_n q_{n+1}) and q_{n+1} >= q_n + q_{n-1}.
        let bracket = Scalar::from_ratio(1, q, prec)
            * Scalar::from_ratio(1, q + prev.index, prec);
        return Ok(RotationEstimate {
            value: Scalar::from_ratio(p, q, prec),
            error_bound: &bracket + &rounding,
            iterations_used: scan.iterations_used,
            rational: false,
        });
    }
    let (d, n) = scan
        .birkhoff
        .expect("scan without returns must carry Birkhoff state");
    if n == 0 {
        return Err(LabError::BudgetExceeded(
            "rotation-number budget exhausted before the first step".into(),
        ));
    }
    Ok(RotationEstimate {
        value: &d / &Scalar::from_i64(n as i64, prec),
        error_bound: &Scalar::from_ratio(1, n as i64, prec) + &rounding,
        iterations_used: scan.iterations_used,
        rational: false,
    })
}

/// Standard floor-and-reciprocal continued fraction of a real in (0, 1).
///
/// Remainders within a precision-scaled snap of an integer are treated as
/// that integer and terminate the expansion with the rational flag, since
/// the tail is rational at working precision.
pub fn continued_fraction_of(rho: &Scalar, depth: usize) -> Result<ContinuedFractionData> {
    let prec = rho.prec();
    let zero = Scalar::zero(prec);
    let one = Scalar::one(prec);
    if rho <= &zero || rho >= &one {
        return Err(LabError::InvalidConfig(format!(
            "continued fraction input must lie in (0, 1), got {rho}"
        )));
    }
    let snap = Scalar::from_f64(2f64.powi(-((prec.bits() as i32 + 2) / 2)), prec);
    let floor_guard = Scalar::from_f64(1e-18, prec);

    let mut r = rho.clone();
    let mut quotients: Vec<u64> = Vec::new();
    let mut rational = false;
    while quotients.len() < depth {
        if r <= floor_guard {
            rational = true;
            break;
        }
        let inv = &one / &r;
        let mut k = inv.floor_i64();
        let mut rem = &inv - &Scalar::from_i64(k, prec);
        if rem > &one - &snap {
            k += 1;
            rem = &inv - &Scalar::from_i64(k, prec);
        }
        quotients.push(k as u64);
        if rem.abs() <= snap {
            rational = true;
            break;
        }
        r = rem;
    }
    ContinuedFractionData::from_quotients(quotients, rational, 0)
}

/// Tune the lift shift of a map family to a target rotation number.
///
/// Bisection on t with the invariant rho(lo) <= target <= rho(hi); the
/// rotation-number budget grows whenever the estimate cannot resolve which
/// side of the target it sits on. Succeeds once an estimate certifies
/// |rho(t) - target| <= tol through its own error bound.
pub fn tune_parameter(
    family: &crate::map::MobiusMap,
    target_rho: &Scalar,
    tol: &Scalar,
    max_budget: u64,
) -> Result<Scalar> {
    let prec = family.precision();
    let zero = Scalar::zero(prec);
    let one = Scalar::one(prec);
    if target_rho <= &zero || target_rho >= &one {
        return Err(LabError::InvalidConfig(format!(
            "target rotation number must lie in (0, 1), got {target_rho}"
        )));
    }
    if tol <= &zero {
        return Err(LabError::InvalidConfig("tolerance must be positive".into()));
    }

    let half = Scalar::from_ratio(1, 2, prec);
    let mut lo = zero.clone();
    let mut hi = one.clone();
    let mut budget: u64 = 4096;
    let floor = Scalar::from_f64(64.0 * prec.epsilon(), prec);

    for _ in 0..500 {
        let mid = &(&lo + &hi) * &half;
        let candidate = family.with_lift_shift(mid.clone());
        let est = rotation_number_lifted(&candidate, budget.min(max_budget))?;
        let diff = &est.value - target_rho;
        if &diff.abs() + &est.error_bound <= *tol {
            return Ok(mid);
        }
        if &diff.abs() > &est.error_bound {
            // The side is certain; move the bracket and relax the budget.
            if diff < zero {
                lo = mid.clone();
            } else {
                hi = mid.clone();
            }
            budget = (budget / 2).max(4096);
        } else {
            // Unresolvable at this budget.
            if budget >= max_budget {
                return Err(LabError::Precision(format!(
                    "rotation estimate (error {}) cannot certify tolerance {} within budget {max_budget}",
                    est.error_bound, tol
                )));
            }
            budget = (budget * 4).min(max_budget);
        }
        if &hi - &lo <= floor {
            return Err(LabError::Precision(format!(
                "tuning bracket collapsed at t = {mid}: mode-locking plateau or precision floor"
            )));
        }
    }
    Err(LabError::Precision(
        "tuning failed to converge within 500 bisection steps".into(),
    ))
}
