//! Dynamical partitions of the circle and the Denjoy estimates.
//!
//! The level-n dynamical partition of a base point x0 splits the circle
//! into q_n arcs of generation n-1 and q_{n-1} arcs of generation n, with
//! all endpoints on the orbit of x0. The classical estimates live here as
//! checkable reports: derivative products over closest-return blocks stay
//! inside [e^-v, e^v], and arc lengths decay geometrically with the level.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::circle::{Arc, CirclePoint};
use crate::error::{LabError, Result};
use crate::map::{CircleMap, Side};
use crate::rotation::{closest_return_quotients, ContinuedFractionData};
use crate::scalar::Scalar;

const DENJOY_SEED: u64 = 0x64656e_6a6f79;

/// Which generation an arc of the partition belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntervalKind {
    /// Generation n-1, orbit indices 0..q_n.
    Long,
    /// Generation n, orbit indices 0..q_{n-1}.
    Short,
}

/// The level-n dynamical partition of a base point.
///
/// A generation-m arc has endpoints x_i and x_{i+q_m}. Its counterclockwise
/// start is x_i for m even and x_{i+q_m} for m odd, following the side
/// alternation of closest returns, so endpoint formulas never branch on
/// parity at call sites. Arcs are treated as half open at their end, which
/// makes membership unique.
pub struct DynamicalPartition {
    level: usize,
    base: CirclePoint,
    long: Vec<Arc>,
    short: Vec<Arc>,
    qn_prev: i64,
    qn: i64,
    orbit: Vec<CirclePoint>,
    starts: Vec<(Scalar, IntervalKind, usize)>,
    cf: ContinuedFractionData,
}

impl DynamicalPartition {
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn base(&self) -> &CirclePoint {
        &self.base
    }

    /// (q_{n-1}, q_n) for this level.
    pub fn q_values(&self) -> (i64, i64) {
        (self.qn_prev, self.qn)
    }

    /// Partial quotients recovered while building the partition.
    pub fn continued_fraction(&self) -> &ContinuedFractionData {
        &self.cf
    }

    /// Generation n-1 arcs, indexed by orbit index i < q_n.
    pub fn long_intervals(&self) -> &[Arc] {
        &self.long
    }

    /// Generation n arcs, indexed by orbit index j < q_{n-1}.
    pub fn short_intervals(&self) -> &[Arc] {
        &self.short
    }

    pub fn arc(&self, kind: IntervalKind, index: usize) -> &Arc {
        match kind {
            IntervalKind::Long => &self.long[index],
            IntervalKind::Short => &self.short[index],
        }
    }

    pub fn interval_count(&self) -> usize {
        self.long.len() + self.short.len()
    }

    /// Orbit points x_0 .. x_{q_n + q_{n-1} - 1}.
    pub fn orbit(&self) -> &[CirclePoint] {
        &self.orbit
    }

    pub fn orbit_point(&self, index: usize) -> &CirclePoint {
        &self.orbit[index]
    }

    /// Arcs in counterclockwise order starting from the one containing 0.
    pub fn arcs_in_order(&self) -> impl Iterator<Item = (IntervalKind, usize, &Arc)> {
        self.starts
            .iter()
            .map(move |(_, kind, i)| (*kind, *i, self.arc(*kind, *i)))
    }

    /// The arc containing `p`, each arc half open at its end.
    pub fn locate(&self, p: &CirclePoint) -> (IntervalKind, usize) {
        let pos = p.position();
        let idx = self.starts.partition_point(|(s, _, _)| s <= pos);
        let k = if idx == 0 {
            self.starts.len() - 1
        } else {
            idx - 1
        };
        let (_, kind, i) = &self.starts[k];
        (*kind, *i)
    }

    pub fn max_length(&self) -> Scalar {
        let mut best = Scalar::zero(self.base.prec());
        for a in self.long.iter().chain(self.short.iter()) {
            let l = a.length();
            if l > best {
                best = l;
            }
        }
        best
    }

    /// Check the refinement identity against the next level.
    ///
    /// Every generation n-1 arc must be tiled, endpoint-exact, by its
    /// generation n+1 arc together with the k_{n+1} generation n arcs at
    /// orbit indices i + q_{n-1} + s q_n.
    pub fn verify_refined_by(&self, finer: &DynamicalPartition) -> Result<()> {
        if finer.level != self.level + 1 {
            return Err(LabError::InvalidConfig(format!(
                "refinement check needs consecutive levels, got {} and {}",
                self.level, finer.level
            )));
        }
        if finer.base.position() != self.base.position() {
            return Err(LabError::InvalidConfig(
                "refinement check needs a common base point".into(),
            ));
        }
        if finer.qn_prev != self.qn {
            return Err(LabError::Precision(format!(
                "levels disagree on q_n: {} versus {}",
                self.qn, finer.qn_prev
            )));
        }
        let k = (finer.qn - self.qn_prev) / self.qn;
        if k < 1 || finer.qn != k * self.qn + self.qn_prev {
            return Err(LabError::Precision(format!(
                "q_{{n+1}} = {} is not k q_n + q_{{n-1}} for q_n = {}, q_{{n-1}} = {}",
                finer.qn, self.qn, self.qn_prev
            )));
        }
        for i in 0..self.qn as usize {
            let coarse = &self.long[i];
            let mut pieces: Vec<&Arc> = vec![&finer.short[i]];
            for s in 0..k as usize {
                pieces.push(&finer.long[i + self.qn_prev as usize + s * self.qn as usize]);
            }
            chain_exactly(coarse, pieces).map_err(|e| {
                LabError::CriterionFailed(format!("refinement fails on long arc {i}: {e}"))
            })?;
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let prec = self.base.prec();
        let mut sum = Scalar::zero(prec);
        for (_, kind, i) in &self.starts {
            sum = &sum + &self.arc(*kind, *i).length();
        }
        let tol = &Scalar::from_i64(self.qn, prec)
            * &Scalar::from_i64(2, prec).powi(4 - prec.bits() as i32);
        let one = Scalar::one(prec);
        if (&sum - &one).abs() > tol {
            return Err(LabError::Precision(format!(
                "partition arc lengths sum to {sum}, expected 1 within {tol}"
            )));
        }
        for k in 0..self.starts.len() {
            let (_, kind, i) = &self.starts[k];
            let (next_start, _, _) = &self.starts[(k + 1) % self.starts.len()];
            if self.arc(*kind, *i).end().position() != next_start {
                return Err(LabError::Precision(
                    "adjacent partition arcs do not share endpoints; orbit order is degenerate at working precision"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

fn chain_exactly(whole: &Arc, mut pieces: Vec<&Arc>) -> Result<()> {
    let mut cur = whole.start().position().clone();
    while !pieces.is_empty() {
        match pieces
            .iter()
            .position(|a| a.start().position() == &cur)
        {
            Some(idx) => cur = pieces.remove(idx).end().position().clone(),
            None => {
                return Err(LabError::CriterionFailed(format!(
                    "no piece starts at {cur}"
                )))
            }
        }
    }
    if &cur != whole.end().position() {
        return Err(LabError::CriterionFailed(
            "pieces stop short of the arc end".into(),
        ));
    }
    Ok(())
}

fn generation_arc(orbit: &[CirclePoint], generation: usize, q_gen: usize, i: usize) -> Result<Arc> {
    let a = orbit[i].clone();
    let b = orbit[i + q_gen].clone();
    if generation % 2 == 0 {
        Arc::new(a, b)
    } else {
        Arc::new(b, a)
    }
}

/// Build the level-n dynamical partition of `x0` under `map`.
///
/// The partial quotients are recovered from the closest returns of the
/// orbit itself, so the construction needs no externally supplied rotation
/// number. The orbit is then extended to q_n + q_{n-1} - 1 steps and the
/// two generations of arcs are assembled and validated.
pub fn dynamical_partition(
    map: &dyn CircleMap,
    x0: &CirclePoint,
    n: usize,
) -> Result<DynamicalPartition> {
    if n == 0 {
        return Err(LabError::InvalidConfig(
            "partition level must be at least 1".into(),
        ));
    }
    let budget = map.orbit_budget();
    let cf = closest_return_quotients(map, x0, n, budget)?;
    if cf.depth() < n {
        return Err(LabError::Precision(format!(
            "closest returns resolve only {} of the requested {n} levels within budget {budget}",
            cf.depth()
        )));
    }
    let qn = cf.q[n];
    let qn_prev = cf.q[n - 1];
    let total = qn + qn_prev;
    if total as u64 > budget {
        return Err(LabError::BudgetExceeded(format!(
            "partition level {n} needs {total} orbit points, budget {budget}"
        )));
    }

    let prec = map.precision();
    let tie = Scalar::from_f64(32.0 * prec.epsilon(), prec);
    let mut orbit: Vec<CirclePoint> = Vec::with_capacity(total as usize);
    orbit.push(x0.clone());
    for i in 1..total as usize {
        let next = map.apply(&orbit[i - 1]);
        if next.signed_offset(x0).abs() <= tie {
            return Err(LabError::RationalRotation(format!(
                "orbit returns to the base point at step {i}; the partition needs an irrational rotation number"
            )));
        }
        orbit.push(next);
    }

    let long = (0..qn as usize)
        .map(|i| generation_arc(&orbit, n - 1, qn_prev as usize, i))
        .collect::<Result<Vec<_>>>()?;
    let short = (0..qn_prev as usize)
        .map(|j| generation_arc(&orbit, n, qn as usize, j))
        .collect::<Result<Vec<_>>>()?;

    let mut starts: Vec<(Scalar, IntervalKind, usize)> = Vec::with_capacity(total as usize);
    for (i, a) in long.iter().enumerate() {
        starts.push((a.start().position().clone(), IntervalKind::Long, i));
    }
    for (j, a) in short.iter().enumerate() {
        starts.push((a.start().position().clone(), IntervalKind::Short, j));
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));

    let part = DynamicalPartition {
        level: n,
        base: x0.clone(),
        long,
        short,
        qn_prev,
        qn,
        orbit,
        starts,
        cf,
    };
    part.validate()?;
    Ok(part)
}

/// Decide whether the iterates f^i(arc), 0 <= i < qn, have pairwise
/// disjoint interiors.
///
/// The images are sorted by start position; disjointness is equivalent to
/// every image ending at or before the start of the next one, cyclically.
/// Shared endpoints are allowed.
pub fn is_qn_small(map: &dyn CircleMap, arc: &Arc, qn: i64) -> Result<bool> {
    if qn < 1 {
        return Err(LabError::InvalidConfig(format!(
            "qn must be at least 1, got {qn}"
        )));
    }
    if qn as u64 > map.orbit_budget() {
        return Err(LabError::BudgetExceeded(format!(
            "qn-smallness check needs {qn} iterations, budget {}",
            map.orbit_budget()
        )));
    }
    if qn == 1 {
        return Ok(true);
    }
    let mut images: Vec<(CirclePoint, Scalar)> = Vec::with_capacity(qn as usize);
    let mut s = arc.start().clone();
    let mut e = arc.end().clone();
    for i in 0..qn {
        images.push((s.clone(), s.ccw_dist(&e)));
        if i + 1 < qn {
            s = map.apply(&s);
            e = map.apply(&e);
        }
    }
    images.sort_by(|a, b| a.0.position().total_cmp(b.0.position()));
    for k in 0..images.len() {
        let (p, len) = &images[k];
        let next = &images[(k + 1) % images.len()].0;
        if len > &p.ccw_dist(next) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Sampled Denjoy estimates at one partition level.
pub struct DenjoyReport {
    pub level: usize,
    /// Products of Df over closest-return blocks of length q_n.
    pub products: Vec<Scalar>,
    /// Ratios Df^k(x) / Df^k(y) for pairs inside a common long arc, k <= q_n.
    pub ratio_samples: Vec<Scalar>,
    /// Total variation of log Df over the circle.
    pub v: Scalar,
    /// Samples outside [e^-v, e^v] beyond numerical tolerance.
    pub violations: usize,
    /// Orbit points that landed on a break point and forced a resample.
    pub collisions: usize,
}

impl DenjoyReport {
    /// Count samples outside [e^-w, e^w], with a small relative allowance
    /// for accumulated rounding.
    pub fn violations_against(&self, w: &Scalar) -> usize {
        let prec = w.prec();
        let slack = &(&Scalar::one(prec) + w) * &Scalar::from_f64(1e-9, prec);
        let bound = w + &slack;
        self.products
            .iter()
            .chain(self.ratio_samples.iter())
            .filter(|s| s.ln().abs() > bound)
            .count()
    }
}

/// Sample the Denjoy estimates at level n.
///
/// Both bounds are sampled `samples` times: derivative products over blocks
/// of length q_n from uniform starting points, and ratios Df^k(x) / Df^k(y)
/// for pairs drawn inside a common long arc with k <= q_n. The first ratio
/// pair is pinned near the two ends of the base long arc with k = q_n,
/// where the bound is tightest. A sample whose orbit lands on a break point
/// is resampled and counted in `collisions`.
pub fn denjoy_report(
    map: &dyn CircleMap,
    x0: &CirclePoint,
    n: usize,
    samples: usize,
) -> Result<DenjoyReport> {
    let part = dynamical_partition(map, x0, n)?;
    let prec = map.precision();
    let qn = part.qn;
    let v = map.variation_log_df();
    let coll_tol = Scalar::from_f64(32.0 * prec.epsilon(), prec);
    let mut rng = ChaCha8Rng::seed_from_u64(DENJOY_SEED ^ n as u64);
    let mut collisions = 0usize;

    let log_block = |start: &CirclePoint, steps: i64, collisions: &mut usize| -> Option<Scalar> {
        let mut sum = Scalar::zero(prec);
        let mut cur = start.clone();
        for _ in 0..steps {
            for b in map.breaks() {
                if cur.signed_offset(&b.location).abs() <= coll_tol {
                    *collisions += 1;
                    return None;
                }
            }
            sum = &sum + &map.deriv_one_sided(&cur, Side::Right).ln();
            cur = map.apply(&cur);
        }
        Some(sum)
    };

    let mut products = Vec::with_capacity(samples);
    while products.len() < samples {
        let mut attempts = 0;
        loop {
            let y = CirclePoint::from_f64(rng.gen::<f64>(), prec);
            if let Some(sum) = log_block(&y, qn, &mut collisions) {
                products.push(sum.exp());
                break;
            }
            attempts += 1;
            if attempts > 64 {
                return Err(LabError::Precision(
                    "persistent break-orbit collisions while sampling products".into(),
                ));
            }
        }
    }

    let mut ratio_samples = Vec::with_capacity(samples);
    while ratio_samples.len() < samples {
        let pinned = ratio_samples.is_empty();
        let mut attempts = 0u32;
        loop {
            let (i, u, w, k) = if pinned {
                let nudge = 0.003 * attempts as f64;
                (0usize, 0.01 + nudge, 0.99 - nudge, qn)
            } else {
                (
                    rng.gen_range(0..qn as usize),
                    rng.gen::<f64>() * 0.98 + 0.01,
                    rng.gen::<f64>() * 0.98 + 0.01,
                    rng.gen_range(1..=qn),
                )
            };
            let arc = &part.long[i];
            let len = arc.length();
            let x = arc.point_at(&(&len * &Scalar::from_f64(u, prec)));
            let y = arc.point_at(&(&len * &Scalar::from_f64(w, prec)));
            let sx = log_block(&x, k, &mut collisions);
            let sy = log_block(&y, k, &mut collisions);
            if let (Some(sx), Some(sy)) = (sx, sy) {
                ratio_samples.push((&sx - &sy).exp());
                break;
            }
            attempts += 1;
            if attempts > 64 {
                return Err(LabError::Precision(
                    "persistent break-orbit collisions while sampling ratios".into(),
                ));
            }
        }
    }

    let mut report = DenjoyReport {
        level: n,
        products,
        ratio_samples,
        v,
        violations: 0,
        collisions,
    };
    let v_own = report.v.clone();
    report.violations = report.violations_against(&v_own);
    Ok(report)
}

/// Geometric decay of the partition arcs, with the variation-based bound.
pub struct LengthDecayFit {
    /// Largest arc length of the level-n partition, for n = 1..=n_max.
    pub max_lengths: Vec<Scalar>,
    /// q_n for the same levels.
    pub q_values: Vec<i64>,
    /// Successive ratios max_lengths[n+1] / max_lengths[n].
    pub rates: Vec<Scalar>,
    /// Geometric rate fitted over the last half of the levels.
    pub fitted_rate: Scalar,
    /// (1 + e^-v)^(-1/2) from the variation of log Df.
    pub lambda_bound: Scalar,
    /// Smallest offset with max_lengths[n] <= lambda_bound^(n - offset)
    /// across the measured levels.
    pub offset_n0: f64,
}

/// Measure the decay of max arc lengths over levels 1..=n_max.
pub fn length_decay_fit(
    map: &dyn CircleMap,
    x0: &CirclePoint,
    n_max: usize,
) -> Result<LengthDecayFit> {
    if n_max < 2 {
        return Err(LabError::InvalidConfig(
            "decay fit needs at least two levels".into(),
        ));
    }
    let prec = map.precision();
    let mut max_lengths = Vec::with_capacity(n_max);
    let mut q_values = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let part = dynamical_partition(map, x0, n)?;
        max_lengths.push(part.max_length());
        q_values.push(part.qn);
    }
    let mut rates = Vec::with_capacity(n_max - 1);
    for i in 0..n_max - 1 {
        rates.push(&max_lengths[i + 1] / &max_lengths[i]);
    }

    let lo = (n_max / 2).min(n_max - 2);
    let xs: Vec<f64> = (lo..n_max).map(|i| (i + 1) as f64).collect();
    let ys: Vec<f64> = (lo..n_max).map(|i| max_lengths[i].ln_f64()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let fitted_rate = Scalar::from_f64((cov / var).exp(), prec);

    let v = map.variation_log_df();
    let e_neg_v = (-&v).exp();
    let lambda_bound = (&Scalar::one(prec) + &e_neg_v).sqrt().recip();
    let log_lambda = lambda_bound.ln_f64();
    let offset_n0 = max_lengths
        .iter()
        .enumerate()
        .map(|(i, l)| (i + 1) as f64 - l.ln_f64() / log_lambda)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(LengthDecayFit {
        max_lengths,
        q_values,
        rates,
        fitted_rate,
        lambda_bound,
        offset_n0,
    })
}
