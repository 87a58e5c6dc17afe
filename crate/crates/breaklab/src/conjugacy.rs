//! Conjugacy construction by orbit-order matching, plus regularity
//! diagnostics for the resulting circle map h.
//!
//! Two maps with the same irrational rotation number visit their orbits
//! in the same circular order, so pairing the orbits point by point and
//! interpolating monotonically in between yields an approximation of the
//! conjugacy h with h(f1(x)) = f2(h(x)). The diagnostics measure how the
//! h-mass distributes over dyadic cells, which separates singular
//! conjugacies from smooth ones at finite resolution.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::circle::CirclePoint;
use crate::error::{LabError, Result};
use crate::map::{CircleMap, SineDiffeo};
use crate::rotation::rotation_number;
use crate::scalar::Scalar;

const RESIDUAL_SAMPLE_SEED: u64 = 0x636f_6e6a;
const BUILT_RESIDUAL_SAMPLES: usize = 256;

/// Distance on the circle, the shorter way around.
fn circ_dist(a: &CirclePoint, b: &CirclePoint) -> Scalar {
    let c = a.ccw_dist(b);
    let other = &Scalar::one(c.prec()) - &c;
    c.min(&other)
}

/// Orbit-matched approximation of the conjugacy h between two maps.
///
/// Pairs (x_i, t_i) with x_i = f1^i(x0) and t_i = f2^i(t0) are stored in
/// orbit order together with the permutation sorting them by circular
/// position, so equivariance on the table is index shift and evaluation
/// is binary search plus linear interpolation.
#[derive(Clone, Debug)]
pub struct ConjugacyApprox {
    base: (CirclePoint, CirclePoint),
    xs: Vec<CirclePoint>,
    ts: Vec<CirclePoint>,
    /// Orbit indices sorted by circular position of x.
    order: Vec<usize>,
    /// Orbit indices sorted by circular position of t.
    t_order: Vec<usize>,
    max_gap_x: Scalar,
    max_gap_t: Scalar,
    /// Equivariance residual sampled once at build time, carried into
    /// singularity reports.
    built_residual: Scalar,
}

impl ConjugacyApprox {
    pub fn count(&self) -> usize {
        self.xs.len()
    }

    pub fn base(&self) -> (&CirclePoint, &CirclePoint) {
        (&self.base.0, &self.base.1)
    }

    /// Pair at orbit index i, so that pair(i+1) = (f1, f2) applied to pair(i).
    pub fn pair(&self, i: usize) -> (&CirclePoint, &CirclePoint) {
        (&self.xs[i], &self.ts[i])
    }

    /// Pairs sorted by circular position of the x coordinate.
    pub fn pairs_in_circular_order(&self) -> impl Iterator<Item = (&CirclePoint, &CirclePoint)> {
        self.order.iter().map(|&i| (&self.xs[i], &self.ts[i]))
    }

    /// Largest gap between circularly consecutive x points.
    pub fn max_gap_x(&self) -> &Scalar {
        &self.max_gap_x
    }

    /// Largest gap between circularly consecutive t points.
    pub fn max_gap_t(&self) -> &Scalar {
        &self.max_gap_t
    }

    /// Equivariance residual measured over fresh samples at build time.
    pub fn built_residual(&self) -> &Scalar {
        &self.built_residual
    }

    /// Index into `order` of the node arc containing `p`, by binary search
    /// over sorted positions with wrap to the last node.
    fn locate(&self, sorted: &[usize], points: &[CirclePoint], p: &CirclePoint) -> usize {
        let pos = p.position();
        let idx = sorted.partition_point(|&i| points[i].position() <= pos);
        (idx + sorted.len() - 1) % sorted.len()
    }

    fn interpolate(
        &self,
        sorted: &[usize],
        from: &[CirclePoint],
        to: &[CirclePoint],
        p: &CirclePoint,
    ) -> CirclePoint {
        let n = sorted.len();
        let j = self.locate(sorted, from, p);
        let lo = &from[sorted[j]];
        let hi = &from[sorted[(j + 1) % n]];
        let span = lo.ccw_dist(hi);
        let offset = lo.ccw_dist(p);
        let t_lo = &to[sorted[j]];
        let t_hi = &to[sorted[(j + 1) % n]];
        let image_span = t_lo.ccw_dist(t_hi);
        t_lo.translate(&(&(&offset / &span) * &image_span))
    }
}

/// Build the orbit-matched conjugacy table for two maps with the same
/// irrational rotation number.
///
/// Fails fast when the rotation-number estimates at budget `n` disagree
/// beyond their combined error bounds, and when the order isomorphism
/// between the two orbits breaks, which signals exhausted precision.
pub fn build_conjugacy(
    map1: &dyn CircleMap,
    map2: &dyn CircleMap,
    x0: &CirclePoint,
    t0: &CirclePoint,
    n: usize,
) -> Result<ConjugacyApprox> {
    if n < 2 {
        return Err(LabError::InvalidConfig(format!(
            "conjugacy table needs at least 2 points, got {n}"
        )));
    }
    if n as u64 > map1.orbit_budget() || n as u64 > map2.orbit_budget() {
        return Err(LabError::BudgetExceeded(format!(
            "table size {n} exceeds an orbit budget ({}, {})",
            map1.orbit_budget(),
            map2.orbit_budget()
        )));
    }
    let rho1 = rotation_number(map1, n as u64)?;
    let rho2 = rotation_number(map2, n as u64)?;
    let gap = circ_dist(
        &CirclePoint::new(rho1.value.clone()),
        &CirclePoint::new(rho2.value.clone()),
    );
    if gap > &rho1.error_bound + &rho2.error_bound {
        return Err(LabError::InvalidConfig(format!(
            "rotation numbers differ: {} (error {}) vs {} (error {})",
            rho1.value, rho1.error_bound, rho2.value, rho2.error_bound
        )));
    }

    let mut xs = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    xs.push(x0.clone());
    ts.push(t0.clone());
    for i in 1..n {
        xs.push(map1.apply(&xs[i - 1]));
        ts.push(map2.apply(&ts[i - 1]));
    }
    assemble_table(map1, map2, x0, t0, xs, ts)
}

/// Assemble a table from matched orbit columns: sort, check the order
/// isomorphism, measure gaps and the build-time residual. Shared by the
/// fresh build and the cache-restore path, so both produce identical
/// tables from identical orbits.
pub(crate) fn assemble_table(
    map1: &dyn CircleMap,
    map2: &dyn CircleMap,
    x0: &CirclePoint,
    t0: &CirclePoint,
    xs: Vec<CirclePoint>,
    ts: Vec<CirclePoint>,
) -> Result<ConjugacyApprox> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].position().partial_cmp(xs[b].position()).unwrap());

    let prec = x0.prec();
    let tie = Scalar::from_f64(32.0 * prec.epsilon(), prec);
    for w in order.windows(2) {
        if (xs[w[1]].position() - xs[w[0]].position()).abs() <= tie {
            return Err(LabError::Precision(format!(
                "orbit points {} and {} collide at working precision; raise mantissa bits",
                w[0], w[1]
            )));
        }
    }

    // Order isomorphism: running through the x-sorted cycle, the t
    // positions must wrap exactly once.
    let mut descents = Vec::new();
    for j in 0..n {
        let a = &ts[order[j]];
        let b = &ts[order[(j + 1) % n]];
        if b.position() <= a.position() {
            descents.push(j);
        }
    }
    if descents.len() != 1 {
        return Err(LabError::Precision(format!(
            "order isomorphism violated: {} descents in the image cycle; raise mantissa bits",
            descents.len()
        )));
    }
    let t_order: Vec<usize> = (0..n)
        .map(|j| order[(descents[0] + 1 + j) % n])
        .collect();

    let cyc_gap = |sorted: &[usize], pts: &[CirclePoint]| {
        let mut gap = Scalar::zero(prec);
        for j in 0..n {
            gap = gap.max(&pts[sorted[j]].ccw_dist(&pts[sorted[(j + 1) % n]]));
        }
        gap
    };
    let max_gap_x = cyc_gap(&order, &xs);
    let max_gap_t = cyc_gap(&t_order, &ts);

    let mut approx = ConjugacyApprox {
        base: (x0.clone(), t0.clone()),
        xs,
        ts,
        order,
        t_order,
        max_gap_x,
        max_gap_t,
        built_residual: Scalar::zero(prec),
    };
    approx.built_residual = equivariance_residual(&approx, map1, map2, BUILT_RESIDUAL_SAMPLES)?;
    Ok(approx)
}

/// Evaluate the monotone interpolant of the conjugacy table.
///
/// Exact on table nodes; between nodes the image moves linearly along the
/// counterclockwise image arc, which keeps h an orientation-preserving
/// circle homeomorphism.
pub fn eval_h(approx: &ConjugacyApprox, x: &CirclePoint) -> CirclePoint {
    approx.interpolate(&approx.order, &approx.xs, &approx.ts, x)
}

/// Evaluate the interpolated inverse of the conjugacy table.
pub fn eval_h_inverse(approx: &ConjugacyApprox, t: &CirclePoint) -> CirclePoint {
    approx.interpolate(&approx.t_order, &approx.ts, &approx.xs, t)
}

/// Largest sampled defect of h(f1(x)) = f2(h(x)), shorter-way distance.
pub fn equivariance_residual(
    approx: &ConjugacyApprox,
    map1: &dyn CircleMap,
    map2: &dyn CircleMap,
    samples: usize,
) -> Result<Scalar> {
    let prec = approx.base.0.prec();
    let mut rng = ChaCha8Rng::seed_from_u64(RESIDUAL_SAMPLE_SEED);
    let mut worst = Scalar::zero(prec);
    for _ in 0..samples {
        let x = CirclePoint::from_f64(rng.gen::<f64>(), prec);
        let lhs = eval_h(approx, &map1.apply(&x));
        let rhs = map2.apply(&eval_h(approx, &x));
        worst = worst.max(&circ_dist(&lhs, &rhs));
    }
    Ok(worst)
}

/// Largest table defect against the closed-form conjugacy psi.
///
/// Meaningful when the table was built with map2 = psi . map1 . psi^{-1}
/// and t0 = psi(x0), in which case t_i = psi(x_i) up to orbit rounding
/// drift.
pub fn smooth_oracle_compare(approx: &ConjugacyApprox, psi: &SineDiffeo) -> Scalar {
    let prec = approx.base.0.prec();
    let mut worst = Scalar::zero(prec);
    for i in 0..approx.count() {
        worst = worst.max(&circ_dist(&approx.ts[i], &psi.apply(&approx.xs[i])));
    }
    worst
}

/// Shared histogram bin edges for log10 slopes.
fn histogram_edges() -> Vec<f64> {
    (0..=24).map(|i| -9.0 + 0.5 * i as f64).collect()
}

/// Dyadic diagnostics of one level k.
#[derive(Clone, Debug, Serialize)]
pub struct SingularityLevel {
    pub k: u32,
    /// Whether the table averages at least 4 points per cell at this level.
    pub dense_enough: bool,
    /// Cell counts per log10-slope bin, edges in `SingularityReport`.
    pub histogram: Vec<usize>,
    pub median_log10_slope: f64,
    pub min_log10_slope: f64,
    pub max_log10_slope: f64,
    /// m(k, delta): Lebesgue measure of the fewest dyadic cells capturing
    /// 1 - delta of the h-mass.
    pub mass_measure: f64,
}

/// Mass-distribution diagnostics of the conjugacy over dyadic grids.
#[derive(Clone, Debug, Serialize)]
pub struct SingularityReport {
    pub delta: f64,
    pub bin_edges: Vec<f64>,
    pub levels: Vec<SingularityLevel>,
    pub equivariance_residual: f64,
}

/// Interval-slope statistics of h over dyadic grids 2^{-k}.
///
/// For each level the h-increment of every dyadic cell is measured; the
/// histogram and median summarize the log10 slopes, and the mass-capture
/// value is found by accumulating the largest increments until 1 - delta
/// of the total mass is covered. Pointwise derivatives are out of reach
/// of finite tables, so all statements are interval statistics.
pub fn singularity_report(
    approx: &ConjugacyApprox,
    k_range: &[u32],
    delta: &Scalar,
) -> Result<SingularityReport> {
    let d = delta.to_f64();
    if !(0.0..1.0).contains(&d) || d <= 0.0 {
        return Err(LabError::InvalidConfig(format!(
            "mass-capture delta must lie in (0, 1), got {d}"
        )));
    }
    if k_range.is_empty() {
        return Err(LabError::InvalidConfig(
            "singularity report needs at least one dyadic level".into(),
        ));
    }
    let prec = approx.base.0.prec();
    let edges = histogram_edges();
    let mut levels = Vec::with_capacity(k_range.len());
    for &k in k_range {
        if k == 0 || k > 30 {
            return Err(LabError::InvalidConfig(format!(
                "dyadic level must lie in [1, 30], got {k}"
            )));
        }
        let cells = 1usize << k;
        let width = 0.5f64.powi(k as i32);
        let grid: Vec<CirclePoint> = (0..cells)
            .map(|j| eval_h(approx, &CirclePoint::from_f64(j as f64 * width, prec)))
            .collect();
        let mut increments: Vec<f64> = (0..cells)
            .map(|j| grid[j].ccw_dist(&grid[(j + 1) % cells]).to_f64())
            .collect();

        let mut histogram = vec![0usize; edges.len() - 1];
        let mut logs: Vec<f64> = increments
            .iter()
            .map(|inc| {
                if *inc > 0.0 {
                    (inc / width).log10()
                } else {
                    edges[0]
                }
            })
            .collect();
        for &l in &logs {
            let bin = edges.partition_point(|e| *e <= l);
            histogram[bin.clamp(1, edges.len() - 1) - 1] += 1;
        }
        logs.sort_by(f64::total_cmp);
        let median = logs[logs.len() / 2];

        increments.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = increments.iter().sum();
        let mut captured = 0.0;
        let mut used = 0usize;
        while used < cells && captured < (1.0 - d) * total {
            captured += increments[used];
            used += 1;
        }

        levels.push(SingularityLevel {
            k,
            dense_enough: approx.count() >= 4 * cells,
            histogram,
            median_log10_slope: median,
            min_log10_slope: logs[0],
            max_log10_slope: logs[logs.len() - 1],
            mass_measure: used as f64 * width,
        });
    }
    Ok(SingularityReport {
        delta: d,
        bin_edges: edges,
        levels,
        equivariance_residual: approx.built_residual.to_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{make_piecewise_mobius, BreakSpec, ConjugatedMap, MobiusMap};
    use crate::rotation::tune_parameter;
    use crate::scalar::Precision;

    const GOLDEN: f64 = 0.6180339887498949;

    fn dbl(x: f64) -> Scalar {
        Scalar::from_f64(x, Precision::DOUBLE)
    }

    fn pt(x: f64) -> CirclePoint {
        CirclePoint::from_f64(x, Precision::DOUBLE)
    }

    fn golden_break_map() -> MobiusMap {
        let base = make_piecewise_mobius(
            vec![BreakSpec {
                location: pt(0.5),
                jump: dbl(2.0),
            }],
            dbl(0.0),
        )
        .unwrap();
        let t = tune_parameter(&base, &dbl(GOLDEN), &dbl(1e-8), 4_000_000).unwrap();
        base.with_lift_shift(t)
    }

    #[test]
    fn identity_pair_gives_identity_table() {
        let r = MobiusMap::rotation(dbl(GOLDEN));
        let x0 = pt(0.1);
        let approx = build_conjugacy(&r, &r, &x0, &x0, 300).unwrap();
        for i in 0..approx.count() {
            let (x, t) = approx.pair(i);
            assert!(circ_dist(x, t).to_f64() <= 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q = pt(rng.gen::<f64>());
            assert!(circ_dist(&eval_h(&approx, &q), &q).to_f64() <= 1e-12);
        }
        let resid = equivariance_residual(&approx, &r, &r, 200).unwrap();
        assert!(resid.to_f64() <= 1e-13, "residual {resid}");
    }

    #[test]
    fn rotation_pair_gives_rotation_table() {
        let r = MobiusMap::rotation(dbl(GOLDEN));
        let x0 = pt(0.15);
        let t0 = pt(0.40);
        let approx = build_conjugacy(&r, &r, &x0, &t0, 500).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = pt(rng.gen::<f64>());
            let want = q.translate(&dbl(0.25));
            assert!(circ_dist(&eval_h(&approx, &q), &want).to_f64() <= 1e-12);
        }
    }

    #[test]
    fn rotation_number_mismatch_fails_fast() {
        let golden = MobiusMap::rotation(dbl(GOLDEN));
        let silver = MobiusMap::rotation(dbl(0.41421356237309515));
        let x0 = pt(0.0);
        let err = build_conjugacy(&golden, &silver, &x0, &x0, 2000).unwrap_err();
        match err {
            LabError::InvalidConfig(msg) => {
                assert!(msg.contains("rotation numbers differ"), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn table_nodes_are_exact_and_arcs_preserved() {
        let f1 = golden_break_map();
        let psi = SineDiffeo::new(dbl(0.5), dbl(0.0)).unwrap();
        let f2 = ConjugatedMap::new(psi.clone(), f1.clone());
        let x0 = pt(0.2);
        let approx = build_conjugacy(&f1, &f2, &x0, &psi.apply(&x0), 400).unwrap();
        for i in 0..approx.count() {
            let (x, t) = approx.pair(i);
            assert!(circ_dist(&eval_h(&approx, x), t).to_f64() == 0.0);
        }
        // Between nodes the image stays in the matching image arc.
        let pairs: Vec<_> = approx
            .pairs_in_circular_order()
            .map(|(x, t)| (x.clone(), t.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let j = rng.gen_range(0..pairs.len());
            let (x_lo, t_lo) = &pairs[j];
            let (x_hi, t_hi) = &pairs[(j + 1) % pairs.len()];
            let span = x_lo.ccw_dist(x_hi).to_f64();
            let q = x_lo.translate(&dbl(span * (0.1 + 0.8 * rng.gen::<f64>())));
            let img = eval_h(&approx, &q);
            let off = t_lo.ccw_dist(&img);
            assert!(off <= t_lo.ccw_dist(t_hi), "image left its arc");
        }
        // And monotonicity on circularly ordered triples.
        for _ in 0..200 {
            let a = pt(rng.gen::<f64>());
            let b = a.translate(&dbl(1e-5 + 0.4 * rng.gen::<f64>()));
            let c = b.translate(&dbl(1e-5 + 0.4 * rng.gen::<f64>()));
            let (ha, hb, hc) = (
                eval_h(&approx, &a),
                eval_h(&approx, &b),
                eval_h(&approx, &c),
            );
            assert!(crate::circle::ccw_ordered(&ha, &hb, &hc));
        }
    }

    #[test]
    fn inverse_interpolant_round_trips() {
        let f1 = golden_break_map();
        // The partner must match rho(f1) to well under 1/N^2 or the orbit
        // orders diverge, so the estimate uses a much larger budget.
        let rho = rotation_number(&f1, 1 << 16).unwrap();
        let f2 = MobiusMap::rotation(rho.value.clone());
        let x0 = pt(0.0);
        let approx = build_conjugacy(&f1, &f2, &x0, &x0, 2048).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = pt(rng.gen::<f64>());
            let back = eval_h_inverse(&approx, &eval_h(&approx, &q));
            assert!(circ_dist(&back, &q).to_f64() <= 1e-9, "round trip drifted");
        }
    }

    #[test]
    fn oracle_table_matches_psi_at_double_precision() {
        let f1 = golden_break_map();
        let psi = SineDiffeo::new(dbl(0.5), dbl(0.0)).unwrap();
        let f2 = ConjugatedMap::new(psi.clone(), f1.clone());
        let x0 = pt(0.2);
        let approx = build_conjugacy(&f1, &f2, &x0, &psi.apply(&x0), 10_000).unwrap();
        let drift = smooth_oracle_compare(&approx, &psi);
        assert!(drift.to_f64() <= 1e-9, "oracle drift {drift}");

        let resid = equivariance_residual(&approx, &f1, &f2, 400).unwrap();
        let bound = &(approx.max_gap_x() + approx.max_gap_t()) * &dbl(10.0);
        assert!(resid <= bound, "residual {resid} exceeds 10x table gaps");
    }

    #[test]
    fn oracle_identity_psi_is_exact() {
        let f1 = golden_break_map();
        let psi = SineDiffeo::new(dbl(0.0), dbl(0.0)).unwrap();
        let f2 = ConjugatedMap::new(psi.clone(), f1.clone());
        let x0 = pt(0.3);
        let approx = build_conjugacy(&f1, &f2, &x0, &psi.apply(&x0), 500).unwrap();
        assert!(smooth_oracle_compare(&approx, &psi).to_f64() <= f64::EPSILON);
    }

    #[test]
    fn oracle_drift_scales_with_precision() {
        let prec = Precision::new(128).unwrap();
        let big = |x: f64| Scalar::from_f64(x, prec);
        let f1 = make_piecewise_mobius(
            vec![BreakSpec {
                location: CirclePoint::from_f64(0.5, prec),
                jump: big(2.0),
            }],
            big(GOLDEN),
        )
        .unwrap();
        let psi = SineDiffeo::new(big(0.9), big(0.0)).unwrap();
        let f2 = ConjugatedMap::new(psi.clone(), f1.clone());
        let x0 = CirclePoint::from_f64(0.2, prec);
        let approx = build_conjugacy(&f1, &f2, &x0, &psi.apply(&x0), 10_000).unwrap();
        let drift = smooth_oracle_compare(&approx, &psi);
        assert!(drift.to_f64() <= 1e-20, "drift {drift} too large for 128 bits");
    }

    #[test]
    fn singularity_identity_is_uniform() {
        let r = MobiusMap::rotation(dbl(GOLDEN));
        let x0 = pt(0.0);
        let approx = build_conjugacy(&r, &r, &x0, &x0, 1 << 12).unwrap();
        let report = singularity_report(&approx, &[4, 6, 8], &dbl(0.1)).unwrap();
        for level in &report.levels {
            assert!(level.dense_enough);
            assert!(level.median_log10_slope.abs() <= 1e-6);
            assert!(level.min_log10_slope.abs() <= 1e-6);
            assert!(level.max_log10_slope.abs() <= 1e-6);
            let width = 0.5f64.powi(level.k as i32);
            assert!(level.mass_measure >= 0.9 - 1e-12);
            assert!(level.mass_measure <= 0.9 + width + 1e-12);
        }
    }

    #[test]
    fn singularity_oracle_slopes_match_dpsi_range() {
        let f1 = golden_break_map();
        let psi = SineDiffeo::new(dbl(0.5), dbl(0.0)).unwrap();
        let f2 = ConjugatedMap::new(psi.clone(), f1.clone());
        let x0 = pt(0.2);
        let approx = build_conjugacy(&f1, &f2, &x0, &psi.apply(&x0), 1 << 12).unwrap();
        let report = singularity_report(&approx, &[6, 8, 10], &dbl(0.1)).unwrap();
        let lo = 0.5f64.log10() - 0.05;
        let hi = 1.5f64.log10() + 0.05;
        for level in &report.levels {
            assert!(level.min_log10_slope >= lo, "level {}", level.k);
            assert!(level.max_log10_slope <= hi, "level {}", level.k);
            assert!(level.mass_measure >= 0.2, "level {}", level.k);
        }
    }

    #[test]
    fn singularity_break_vs_rotation_concentrates() {
        let f1 = golden_break_map();
        let rho = rotation_number(&f1, 1 << 16).unwrap();
        let f2 = MobiusMap::rotation(rho.value.clone());
        let x0 = pt(0.0);
        let approx = build_conjugacy(&f1, &f2, &x0, &x0, 1 << 13).unwrap();
        let report = singularity_report(&approx, &[6, 8, 10, 11], &dbl(0.1)).unwrap();
        let masses: Vec<f64> = report.levels.iter().map(|l| l.mass_measure).collect();
        for w in masses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "mass capture must not grow with k");
        }
        assert!(masses[masses.len() - 1] < masses[0], "no concentration seen");
        // Slope extremes widen as the staircase develops contrast.
        let first = &report.levels[0];
        let last = &report.levels[report.levels.len() - 1];
        assert!(last.max_log10_slope > first.max_log10_slope);
        assert!(last.min_log10_slope < first.min_log10_slope);
    }

    #[test]
    fn density_flag_reports_sparse_levels() {
        let r = MobiusMap::rotation(dbl(GOLDEN));
        let x0 = pt(0.0);
        let approx = build_conjugacy(&r, &r, &x0, &x0, 256).unwrap();
        let report = singularity_report(&approx, &[4, 10], &dbl(0.1)).unwrap();
        assert!(report.levels[0].dense_enough);
        assert!(!report.levels[1].dense_enough);
    }
}
