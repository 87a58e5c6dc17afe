//! Cross-ratio tools: lifted quadruples, distortion under iterates, the
//! one-break G-function, and certified product bounds.
//!
//! The cross-ratio of four increasing reals is preserved by projective
//! maps, so a piecewise Moebius circle map distorts it only when the
//! quadruple straddles a break. The G-function captures the limiting
//! distortion across a single break, and the certified bounds pin the
//! region where products of G-factors stay close to the product of jumps.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::circle::CirclePoint;
use crate::error::{LabError, Result};
use crate::map::CircleMap;
use crate::scalar::{Precision, Scalar};

const RESIDUAL_SEED: u64 = 0x7265_7369_6475;

/// Strictly increasing real quadruple, usually a lifted circle quadruple.
#[derive(Clone, Debug)]
pub struct LiftedQuadruple {
    z: [Scalar; 4],
}

impl LiftedQuadruple {
    /// Wrap four strictly increasing reals. No diameter constraint; lifted
    /// circle quadruples additionally satisfy z4 - z1 < 1 by construction
    /// in [`lift_quadruple`].
    pub fn from_reals(z: [Scalar; 4]) -> Result<LiftedQuadruple> {
        for i in 0..3 {
            if z[i] >= z[i + 1] {
                return Err(LabError::InvalidConfig(format!(
                    "quadruple must be strictly increasing, got {} then {}",
                    z[i],
                    z[i + 1]
                )));
            }
        }
        Ok(LiftedQuadruple { z })
    }

    pub fn values(&self) -> &[Scalar; 4] {
        &self.z
    }

    pub fn diameter(&self) -> Scalar {
        &self.z[3] - &self.z[0]
    }
}

/// Lift a circularly ordered quadruple to increasing reals.
///
/// The hat construction keeps z1 and adds 1 to every point that wraps past
/// zero, which is the same as adding the counterclockwise distance from z1
/// to each point. The result starts at z1 and has diameter below 1.
pub fn lift_quadruple(
    z1: &CirclePoint,
    z2: &CirclePoint,
    z3: &CirclePoint,
    z4: &CirclePoint,
) -> Result<LiftedQuadruple> {
    let d2 = z1.ccw_dist(z2);
    let d3 = z1.ccw_dist(z3);
    let d4 = z1.ccw_dist(z4);
    let zero = Scalar::zero(z1.prec());
    if !(d2 > zero && d3 > d2 && d4 > d3) {
        return Err(LabError::InvalidConfig(
            "quadruple is not in circular order".into(),
        ));
    }
    let base = z1.position();
    LiftedQuadruple::from_reals([base.clone(), base + &d2, base + &d3, base + &d4])
}

/// Cr(z1,z2,z3,z4) = ((z2-z1)(z4-z3)) / ((z3-z1)(z4-z2)).
///
/// Lies in (0,1) for strictly increasing quadruples and is invariant under
/// affine maps z -> a z + b with a > 0.
pub fn cross_ratio(q: &LiftedQuadruple) -> Scalar {
    let z = &q.z;
    let num = &(&z[1] - &z[0]) * &(&z[3] - &z[2]);
    let den = &(&z[2] - &z[0]) * &(&z[3] - &z[1]);
    &num / &den
}

/// Distortion of one quadruple under some number of map iterates.
#[derive(Clone, Debug)]
pub struct DistortionSample {
    pub quadruple: LiftedQuadruple,
    pub cr_before: Scalar,
    pub cr_after: Scalar,
    /// cr_after / cr_before.
    pub dist: Scalar,
    /// z4 - z1 of the input quadruple.
    pub diameter: Scalar,
}

/// Distortion of the cross-ratio of `q` under `iterates` steps of the lift.
///
/// Negative counts use the inverse lift. The image quadruple stays
/// increasing because lifts are strictly increasing, and the distortion
/// telescopes over single steps.
pub fn distortion(
    q: &LiftedQuadruple,
    map: &dyn CircleMap,
    iterates: i64,
) -> Result<DistortionSample> {
    if iterates.unsigned_abs() > map.orbit_budget() {
        return Err(LabError::BudgetExceeded(format!(
            "distortion over {iterates} iterates, budget {}",
            map.orbit_budget()
        )));
    }
    let mut image = q.z.clone();
    for _ in 0..iterates.unsigned_abs() {
        for v in image.iter_mut() {
            *v = if iterates >= 0 {
                map.eval_lift(v)
            } else {
                map.eval_lift_inverse(v)
            };
        }
    }
    let cr_before = cross_ratio(q);
    let cr_after = cross_ratio(&LiftedQuadruple::from_reals(image)?);
    let dist = &cr_after / &cr_before;
    Ok(DistortionSample {
        quadruple: q.clone(),
        cr_before,
        cr_after,
        dist,
        diameter: q.diameter(),
    })
}

/// Arguments of the one-break distortion function G.
#[derive(Clone, Debug)]
pub struct GParams {
    pub sigma: Scalar,
    /// The xi variable, beta / alpha >= 0.
    pub x: Scalar,
    /// The z variable, tau / alpha in [0, 1].
    pub y: Scalar,
}

impl GParams {
    pub fn new(sigma: Scalar, x: Scalar, y: Scalar) -> Result<GParams> {
        let prec = sigma.prec();
        let zero = Scalar::zero(prec);
        let one = Scalar::one(prec);
        if sigma <= zero {
            return Err(LabError::InvalidConfig(format!(
                "jump ratio must be positive, got {sigma}"
            )));
        }
        if x < zero {
            return Err(LabError::InvalidConfig(format!(
                "the xi variable must be nonnegative, got {x}"
            )));
        }
        if y < zero || y > one {
            return Err(LabError::InvalidConfig(format!(
                "the z variable must lie in [0, 1], got {y}"
            )));
        }
        Ok(GParams { sigma, x, y })
    }
}

/// G(x,y) = [sigma + (1-sigma) y](1+x) / (sigma + (1-sigma) y + x).
///
/// Equals the exact cross-ratio distortion of a piecewise linear map with
/// one break of jump sigma when the break lies in [z1, z2]. Tends to the
/// bracket A = sigma + (1-sigma) y as x grows, and to 1 as x tends to 0.
pub fn g_function(p: &GParams) -> Scalar {
    let prec = p.sigma.prec();
    let one = Scalar::one(prec);
    let a = &p.sigma + &(&(&one - &p.sigma) * &p.y);
    &(&a * &(&one + &p.x)) / &(&a + &p.x)
}

fn g_corner(sigma: &Scalar, x: &Scalar, y: &Scalar) -> Scalar {
    g_function(&GParams {
        sigma: sigma.clone(),
        x: x.clone(),
        y: y.clone(),
    })
}

/// Largest deviation of a product of per-break factor values from the
/// product of jumps, given each factor's value at the worst corner.
///
/// Every G-factor is monotone in x and in y separately, so over the region
/// x >= omega, 0 <= y <= theta it ranges between its asymptote sigma and
/// its corner value; the product then ranges between the products of the
/// per-factor extremes.
fn product_dev<F>(jumps: &[Scalar], target: &Scalar, factor: F) -> Scalar
where
    F: Fn(&Scalar) -> Scalar,
{
    let prec = target.prec();
    let mut lo = Scalar::one(prec);
    let mut hi = Scalar::one(prec);
    for s in jumps {
        let f = factor(s);
        if &f <= s {
            lo = &lo * &f;
            hi = &hi * s;
        } else {
            lo = &lo * s;
            hi = &hi * &f;
        }
    }
    (target - &lo).max(&(&hi - target))
}

/// Certified constants (Omega0, theta0, Lambda) for the product bounds.
///
/// Lambda is min of the two jump products and their absolute difference.
/// theta0 is halved until both bracket products [sigma + (1-sigma) y] sit
/// within Lambda/16 of their targets, then Omega0 is doubled until the full
/// corner products certify Lambda/8. Monotonicity of each factor makes the
/// corner evaluation a rigorous bound over the whole region.
pub fn lemma52_bounds(jumps1: &[Scalar], jumps2: &[Scalar]) -> Result<(Scalar, Scalar, Scalar)> {
    let bits = jumps1
        .iter()
        .chain(jumps2.iter())
        .map(|s| s.prec().bits())
        .max()
        .unwrap_or(Precision::DOUBLE.bits());
    let prec = Precision::new(bits)?;
    let zero = Scalar::zero(prec);
    for s in jumps1.iter().chain(jumps2.iter()) {
        if s <= &zero {
            return Err(LabError::InvalidConfig(format!(
                "jump ratios must be positive, got {s}"
            )));
        }
    }
    let product = |js: &[Scalar]| {
        js.iter()
            .fold(Scalar::one(prec), |acc, s| &acc * s)
    };
    let s1 = product(jumps1);
    let s2 = product(jumps2);
    let lambda = s1.min(&s2).min(&(&s1 - &s2).abs());
    if lambda <= zero {
        return Err(LabError::InvalidConfig(
            "jump products coincide, so Lambda = 0 and the bounds are vacuous".into(),
        ));
    }

    let half = Scalar::from_ratio(1, 2, prec);
    let one = Scalar::one(prec);
    let lam16 = &lambda / &Scalar::from_i64(16, prec);
    let mut theta = half.clone();
    let mut certified = false;
    for _ in 0..200 {
        let bracket = |s: &Scalar| s + &(&(&one - s) * &theta);
        if product_dev(jumps1, &s1, bracket) <= lam16
            && product_dev(jumps2, &s2, bracket) <= lam16
        {
            certified = true;
            break;
        }
        theta = &theta * &half;
    }
    if !certified {
        return Err(LabError::Precision(
            "no certifiable theta0 above the precision floor".into(),
        ));
    }

    let lam8 = &lambda / &Scalar::from_i64(8, prec);
    let two = Scalar::from_i64(2, prec);
    let mut omega = two.clone();
    for _ in 0..200 {
        let corner1 = |s: &Scalar| g_corner(s, &omega, &theta);
        if product_dev(jumps1, &s1, corner1) <= lam8 {
            let corner2 = |s: &Scalar| g_corner(s, &omega, &theta);
            if product_dev(jumps2, &s2, corner2) <= lam8 {
                return Ok((omega, theta, lambda));
            }
        }
        omega = &omega * &two;
    }
    Err(LabError::Precision(
        "no certifiable Omega0 below the overflow ceiling".into(),
    ))
}

/// Which residual family a regression samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualMode {
    /// Quadruples inside one continuity interval; residual is |Dist - 1|.
    Smooth,
    /// Break in [z1, z2]; residual is |Dist - G|.
    Break,
}

/// Log-log regression of distortion residuals against quadruple diameter.
#[derive(Clone, Debug, Serialize)]
pub struct RegressionReport {
    pub mode: String,
    /// Median over trials of the per-trial least-squares slope.
    pub slope: f64,
    /// Intercept of the median trial, natural log scale.
    pub intercept: f64,
    /// Coefficient of determination of the median trial.
    pub r2: f64,
    pub n_samples: usize,
    /// Residuals sat at rounding level, so no slope is reported.
    pub exact_family: bool,
}

fn least_squares(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = cov / var;
    let intercept = my - slope * mx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (slope * p.0 + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Continuity arcs of the map as (start, length) in circle coordinates.
fn continuity_arcs(map: &dyn CircleMap) -> Vec<(Scalar, Scalar)> {
    let prec = map.precision();
    let breaks = map.breaks();
    if breaks.is_empty() {
        return vec![(Scalar::zero(prec), Scalar::one(prec))];
    }
    let mut arcs = Vec::with_capacity(breaks.len());
    for (i, b) in breaks.iter().enumerate() {
        let next = &breaks[(i + 1) % breaks.len()];
        let len = b.location.ccw_dist(&next.location);
        let len = if len.is_zero() { Scalar::one(prec) } else { len };
        arcs.push((b.location.position().clone(), len));
    }
    arcs
}

/// Regress distortion residuals over shrinking diameters.
///
/// Each trial fixes the quadruple shape and location, then rescales it
/// through a geometric diameter ladder; the reported slope is the median
/// of the per-trial least-squares slopes, which resists outliers from
/// samples that graze a break orbit. Residuals at rounding level are
/// dropped, and a family whose residuals all sit there is reported as
/// exact instead of fitted.
pub fn distortion_residuals(
    map: &dyn CircleMap,
    mode: ResidualMode,
    trials: usize,
) -> Result<RegressionReport> {
    if trials == 0 {
        return Err(LabError::InvalidConfig(
            "residual regression needs at least one trial".into(),
        ));
    }
    let prec = map.precision();
    // Cross-ratio rounding noise scales like epsilon over the diameter, so
    // the keep-or-drop floor must scale the same way.
    let eps_floor = |d: f64| 32.0 * prec.epsilon() / d;
    let mut rng = ChaCha8Rng::seed_from_u64(RESIDUAL_SEED ^ matches!(mode, ResidualMode::Break) as u64);
    let ladder: Vec<f64> = (0..12)
        .map(|j| 10f64.powf(-2.0 - 3.0 * j as f64 / 11.0))
        .collect();
    let arcs = continuity_arcs(map);
    if matches!(mode, ResidualMode::Break) && map.breaks().is_empty() {
        return Err(LabError::InvalidConfig(
            "break-mode residuals need a map with break points".into(),
        ));
    }

    let mut fits: Vec<(f64, f64, f64)> = Vec::new();
    let mut n_samples = 0usize;
    let mut attempted = 0usize;
    for _ in 0..trials {
        let mut pts = Vec::with_capacity(ladder.len());
        match mode {
            ResidualMode::Smooth => {
                let (start, len) = &arcs[rng.gen_range(0..arcs.len())];
                let len = len.to_f64();
                if len < 4.0 * ladder[0] {
                    continue;
                }
                let u = rng.gen::<f64>();
                let (a, b) = (
                    0.2 + 0.2 * rng.gen::<f64>(),
                    0.55 + 0.25 * rng.gen::<f64>(),
                );
                // Place the trial base once, leaving room for the widest rung.
                let z1 = start
                    + &Scalar::from_f64(0.05 * len + u * (0.9 * len - 3.0 * ladder[0]), prec);
                for &d in &ladder {
                    let q = LiftedQuadruple::from_reals([
                        z1.clone(),
                        &z1 + &Scalar::from_f64(a * d, prec),
                        &z1 + &Scalar::from_f64(b * d, prec),
                        &z1 + &Scalar::from_f64(d, prec),
                    ])?;
                    let resid = (distortion(&q, map, 1)?.dist.to_f64() - 1.0).abs();
                    attempted += 1;
                    if resid > eps_floor(d) {
                        pts.push((d.ln(), resid.ln()));
                    }
                }
            }
            ResidualMode::Break => {
                let breaks = map.breaks();
                let pick = rng.gen_range(0..breaks.len());
                let b = &breaks[pick];
                let sigma = b.jump.clone();
                let zf = 0.2 + 0.6 * rng.gen::<f64>();
                let xf = 0.6 + 1.2 * rng.gen::<f64>();
                let gf = 0.2 + 0.3 * rng.gen::<f64>();
                let g = g_function(&GParams::new(
                    sigma,
                    Scalar::from_f64(xf, prec),
                    Scalar::from_f64(zf, prec),
                )?);
                for &d in &ladder {
                    let alpha = d / (1.0 + xf + gf);
                    let z2 = b.location.position() + &Scalar::from_f64(zf * alpha, prec);
                    let z1 = &z2 - &Scalar::from_f64(alpha, prec);
                    let z3 = &z2 + &Scalar::from_f64(xf * alpha, prec);
                    let z4 = &z3 + &Scalar::from_f64(gf * alpha, prec);
                    let clear = breaks.iter().enumerate().all(|(j, other)| {
                        j == pick || {
                            let gap = b.location.ccw_dist(&other.location).to_f64();
                            gap.min(1.0 - gap) > 2.0 * d
                        }
                    });
                    if !clear {
                        continue;
                    }
                    let q = LiftedQuadruple::from_reals([z1, z2.clone(), z3, z4])?;
                    let resid = (&distortion(&q, map, 1)?.dist - &g).abs().to_f64();
                    attempted += 1;
                    if resid > eps_floor(d) {
                        pts.push((d.ln(), resid.ln()));
                    }
                }
            }
        }
        if pts.len() >= 6 {
            n_samples += pts.len();
            fits.push(least_squares(&pts));
        }
    }

    let label = match mode {
        ResidualMode::Smooth => "smooth",
        ResidualMode::Break => "break",
    };
    // A family is exact when most trials never rise above the rounding
    // floor; a stray noise-dominated fit must not masquerade as a slope.
    if fits.len() * 2 < trials {
        return Ok(RegressionReport {
            mode: label.into(),
            slope: 0.0,
            intercept: 0.0,
            r2: 0.0,
            n_samples: attempted,
            exact_family: true,
        });
    }
    fits.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (slope, intercept, r2) = fits[fits.len() / 2];
    Ok(RegressionReport {
        mode: label.into(),
        slope,
        intercept,
        r2,
        n_samples,
        exact_family: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{make_piecewise_mobius, BreakSpec, MobiusMap, SineDiffeo};

    fn dbl(x: f64) -> Scalar {
        Scalar::from_f64(x, Precision::DOUBLE)
    }

    fn pt(x: f64) -> CirclePoint {
        CirclePoint::from_f64(x, Precision::DOUBLE)
    }

    fn quad(a: f64, b: f64, c: f64, d: f64) -> LiftedQuadruple {
        LiftedQuadruple::from_reals([dbl(a), dbl(b), dbl(c), dbl(d)]).unwrap()
    }

    fn one_break(b: f64, s: f64, shift: f64) -> MobiusMap {
        make_piecewise_mobius(
            vec![BreakSpec {
                location: pt(b),
                jump: dbl(s),
            }],
            dbl(shift),
        )
        .unwrap()
    }

    #[test]
    fn lift_matches_hat_construction() {
        let q = lift_quadruple(&pt(0.1), &pt(0.2), &pt(0.3), &pt(0.4)).unwrap();
        let want = [0.1, 0.2, 0.3, 0.4];
        for (v, w) in q.values().iter().zip(&want) {
            assert!((v.to_f64() - w).abs() < 1e-15);
        }
        let q = lift_quadruple(&pt(0.8), &pt(0.9), &pt(0.1), &pt(0.2)).unwrap();
        let want = [0.8, 0.9, 1.1, 1.2];
        for (v, w) in q.values().iter().zip(&want) {
            assert!((v.to_f64() - w).abs() < 1e-15);
        }
        assert!(lift_quadruple(&pt(0.1), &pt(0.3), &pt(0.2), &pt(0.4)).is_err());
    }

    #[test]
    fn lift_properties_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let z1 = rng.gen::<f64>();
            let mut gaps = [0.0; 3];
            for g in gaps.iter_mut() {
                *g = rng.gen::<f64>() + 1e-6;
            }
            let scale = (0.2 + 0.79 * rng.gen::<f64>()) / (gaps[0] + gaps[1] + gaps[2]);
            let p2 = (z1 + gaps[0] * scale).fract();
            let p3 = (z1 + (gaps[0] + gaps[1]) * scale).fract();
            let p4 = (z1 + (gaps[0] + gaps[1] + gaps[2]) * scale).fract();
            let q = lift_quadruple(&pt(z1), &pt(p2), &pt(p3), &pt(p4)).unwrap();
            let v = q.values();
            assert!(v[0] < v[1] && v[1] < v[2] && v[2] < v[3]);
            assert!(q.diameter().to_f64() < 1.0);
            assert!((v[0].to_f64() - z1).abs() < 1e-15);
            let cr = cross_ratio(&q).to_f64();
            assert!(cr > 0.0 && cr < 1.0);
        }
    }

    #[test]
    fn cross_ratio_pinned_values() {
        assert!((cross_ratio(&quad(0.0, 1.0, 2.0, 3.0)).to_f64() - 0.25).abs() < 1e-15);
        assert!((cross_ratio(&quad(0.0, 1.0, 2.0, 4.0)).to_f64() - 1.0 / 3.0).abs() < 1e-15);
        // Dyadic gaps and base keep the construction exact, so the check
        // measures the cross-ratio itself instead of input rounding.
        for g in [2f64.powi(-20), 0.03125, 4.0, 2048.0] {
            let q = quad(0.5, 0.5 + g, 0.5 + 2.0 * g, 0.5 + 3.0 * g);
            assert!((cross_ratio(&q).to_f64() - 0.25).abs() < 1e-12, "gap {g}");
        }
    }

    #[test]
    fn cross_ratio_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let z1 = rng.gen::<f64>() * 4.0 - 2.0;
            let q = quad(
                z1,
                z1 + rng.gen::<f64>() + 0.01,
                z1 + 1.2 + rng.gen::<f64>(),
                z1 + 2.5 + rng.gen::<f64>(),
            );
            let a = 0.1 + 3.0 * rng.gen::<f64>();
            let b = rng.gen::<f64>() * 10.0 - 5.0;
            let mapped = LiftedQuadruple::from_reals([
                &(&q.values()[0] * &dbl(a)) + &dbl(b),
                &(&q.values()[1] * &dbl(a)) + &dbl(b),
                &(&q.values()[2] * &dbl(a)) + &dbl(b),
                &(&q.values()[3] * &dbl(a)) + &dbl(b),
            ])
            .unwrap();
            let d = (cross_ratio(&q).to_f64() - cross_ratio(&mapped).to_f64()).abs();
            assert!(d < 1e-13, "affine invariance broke by {d}");
        }
    }

    #[test]
    fn projective_pieces_do_not_distort() {
        let m = make_piecewise_mobius(
            vec![
                BreakSpec {
                    location: pt(0.25),
                    jump: dbl(2.0),
                },
                BreakSpec {
                    location: pt(0.75),
                    jump: dbl(3.0),
                },
            ],
            dbl(0.2),
        )
        .unwrap();
        let q = quad(0.3, 0.4, 0.55, 0.7);
        let s = distortion(&q, &m, 1).unwrap();
        assert!((s.dist.to_f64() - 1.0).abs() < 1e-12);
        assert!(s.cr_before.to_f64() > 0.0 && s.cr_before.to_f64() < 1.0);
        assert!(s.cr_after.to_f64() > 0.0 && s.cr_after.to_f64() < 1.0);
    }

    #[test]
    fn rotation_distortion_is_one() {
        let r = MobiusMap::rotation(dbl(0.6180339887498949));
        let q = quad(0.1, 0.35, 0.6, 0.95);
        let s = distortion(&q, &r, 5).unwrap();
        assert!((s.dist.to_f64() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distortion_telescopes() {
        let m = one_break(0.5, 2.0, 0.37);
        let q = quad(0.45, 0.48, 0.52, 0.56);
        let direct = distortion(&q, &m, 7).unwrap().dist;
        let mut product = dbl(1.0);
        let mut cur = q.clone();
        for _ in 0..7 {
            let step = distortion(&cur, &m, 1).unwrap();
            product = &product * &step.dist;
            let v = cur.values();
            cur = LiftedQuadruple::from_reals([
                m.eval_lift(&v[0]),
                m.eval_lift(&v[1]),
                m.eval_lift(&v[2]),
                m.eval_lift(&v[3]),
            ])
            .unwrap();
        }
        let rel = ((direct.to_f64() - product.to_f64()) / product.to_f64()).abs();
        assert!(rel < 1e-10, "telescoping off by {rel}");
    }

    #[test]
    fn g_function_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = dbl(rng.gen::<f64>() * 50.0);
            let y = dbl(rng.gen::<f64>());
            let g1 = g_function(&GParams::new(dbl(1.0), x.clone(), y.clone()).unwrap());
            assert!((g1.to_f64() - 1.0).abs() < 1e-14);
            let s = dbl(0.3 + 5.0 * rng.gen::<f64>());
            let g0 = g_function(&GParams::new(s, dbl(0.0), y).unwrap());
            assert!((g0.to_f64() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn g_function_limit_and_monotonicity() {
        let p = GParams::new(dbl(2.0), dbl(1000.0), dbl(0.0)).unwrap();
        assert!((g_function(&p).to_f64() - 2.0).abs() < 1e-2);
        let mut prev = 0.0;
        for k in 0..60 {
            let x = dbl(0.1 * 1.3f64.powi(k));
            let g = g_function(&GParams::new(dbl(2.0), x, dbl(0.4)).unwrap()).to_f64();
            assert!(g > prev, "G must increase in x for sigma > 1, y < 1");
            prev = g;
        }
    }

    #[test]
    fn lemma52_certifies_against_grid_oracle() {
        let (omega, theta, lambda) = lemma52_bounds(&[dbl(2.0)], &[]).unwrap();
        assert!((lambda.to_f64() - 1.0).abs() < 1e-15);
        assert!(omega.to_f64() > 1.0);
        let th = theta.to_f64();
        assert!(th > 0.0 && th < 1.0);

        let om = omega.to_f64();
        let mut max_dev: f64 = 0.0;
        for i in 0..1000 {
            let x = om * 1000f64.powf(i as f64 / 999.0);
            for j in 0..1000 {
                let y = th * j as f64 / 999.0;
                let a = 2.0 + (1.0 - 2.0) * y;
                let g = a * (1.0 + x) / (a + x);
                max_dev = max_dev.max((g - 2.0).abs());
            }
        }
        assert!(
            max_dev <= lambda.to_f64() / 8.0 + 1e-12,
            "grid deviation {max_dev} exceeds Lambda/8"
        );

        // The grid extends only to 1000 omega; monotonicity in x closes the
        // tail, and monotonicity in y pins the other edge.
        let mut prev = 0.0;
        for i in 0..100 {
            let x = om * 10f64.powf(i as f64 / 9.0);
            let a = 2.0 - th;
            let g = a * (1.0 + x) / (a + x);
            assert!(g >= prev);
            prev = g;
        }
        assert!(prev < 2.0);
    }

    #[test]
    fn lemma52_min_arithmetic_and_rejection() {
        let (_, _, lambda) = lemma52_bounds(&[dbl(2.0), dbl(3.0)], &[dbl(5.0)]).unwrap();
        assert!((lambda.to_f64() - 1.0).abs() < 1e-15);
        assert!(matches!(
            lemma52_bounds(&[dbl(2.0)], &[dbl(2.0)]),
            Err(LabError::InvalidConfig(_))
        ));
    }

    #[test]
    fn lemma52_certifies_multi_break_families() {
        let j1 = [dbl(2.0), dbl(1.5)];
        let j2 = [dbl(4.0)];
        let (omega, theta, lambda) = lemma52_bounds(&j1, &j2).unwrap();
        assert!((lambda.to_f64() - 1.0).abs() < 1e-12);
        // Worst corner of family 1 stays within Lambda/8 of 3.
        let g = |s: f64| {
            let a = s + (1.0 - s) * theta.to_f64();
            a * (1.0 + omega.to_f64()) / (a + omega.to_f64())
        };
        let dev = (3.0 - g(2.0) * g(1.5)).abs();
        assert!(dev <= lambda.to_f64() / 8.0 + 1e-12);
    }

    #[test]
    fn residuals_mobius_smooth_is_exact() {
        let m = one_break(0.5, 2.0, 0.37);
        let rep = distortion_residuals(&m, ResidualMode::Smooth, 10).unwrap();
        assert!(rep.exact_family, "Moebius pieces preserve cross-ratios");
    }

    #[test]
    fn residuals_smooth_diffeo_slope_near_two() {
        let psi = SineDiffeo::new(dbl(0.5), dbl(0.1)).unwrap();
        let rep = distortion_residuals(&psi, ResidualMode::Smooth, 20).unwrap();
        assert!(!rep.exact_family);
        assert!(rep.slope >= 1.8, "slope {}", rep.slope);
        assert!(rep.r2 > 0.9, "r2 {}", rep.r2);
    }

    #[test]
    fn residuals_break_mode_slope_near_one() {
        let m = one_break(0.5, 2.0, 0.37);
        let rep = distortion_residuals(&m, ResidualMode::Break, 20).unwrap();
        assert!(!rep.exact_family);
        assert!(rep.slope >= 0.9, "slope {}", rep.slope);
        assert!(rep.slope <= 1.6, "slope {}", rep.slope);
    }

    #[test]
    fn break_mode_needs_breaks() {
        let r = MobiusMap::rotation(dbl(0.4142135623730951));
        assert!(distortion_residuals(&r, ResidualMode::Break, 5).is_err());
    }
}
