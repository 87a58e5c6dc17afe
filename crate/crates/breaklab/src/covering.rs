//! Break-point combinatorics in a renormalization window.
//!
//! The closed window [x_{q_n}, x_{q_{n-1}}] around a base point x0 collects
//! exactly one backward iterate of every break point of a map. This module
//! builds that combined break set for a conjugate pair of maps, refines
//! m0-adic grids over the window until the cluster structure stabilizes,
//! and constructs four-point covers [z1, z4] around a cluster whose jump
//! products differ between the two maps. Iterating the cover and comparing
//! cross-ratio distortion along the two circles then exhibits the gap that
//! separates maps with different total jumps.
//!
//! Grid combinatorics run in exact rational arithmetic: binary floats are
//! dyadic rationals, so cell indices, cluster splits and the distance
//! claims of the pigeonhole search are decided without rounding.

use rug::ops::Pow;
use rug::{Integer, Rational};
use serde::Serialize;

use crate::circle::{circular_distance, Arc, CirclePoint};
use crate::conjugacy::{eval_h, eval_h_inverse, ConjugacyApprox};
use crate::crossratio::{distortion, lift_quadruple};
use crate::error::{LabError, Result};
use crate::map::{CircleMap, SineDiffeo};
use crate::rotation::closest_return_quotients;
use crate::scalar::{Precision, Scalar};

/// Grid-level stride of the pigeonhole search. The cover offsets leave a
/// two-level safety margin below this stride, so it is a structural
/// constant rather than a tunable.
pub const COVER_SEARCH_STEP: u32 = 9;

/// The renormalization window of a map at level n: the arc from
/// x_{q_n} counterclockwise through the base point to x_{q_{n-1}}.
#[derive(Clone, Debug)]
pub struct WindowFrame {
    pub start: CirclePoint,
    pub base: CirclePoint,
    pub end: CirclePoint,
    pub qn: i64,
    pub qn_prev: i64,
    pub d_n: Scalar,
}

impl WindowFrame {
    /// A frame with prescribed geometry, for grid tests that never iterate
    /// a map. Offsets are measured from 0, the base sits at `base_offset`.
    pub fn synthetic(
        d_n: Scalar,
        base_offset: Scalar,
        qn: i64,
        qn_prev: i64,
    ) -> Result<WindowFrame> {
        let prec = d_n.prec();
        if d_n <= Scalar::zero(prec) || d_n >= Scalar::one(prec) {
            return Err(LabError::InvalidConfig(format!(
                "window length must lie in (0, 1), got {d_n}"
            )));
        }
        if base_offset <= Scalar::zero(prec) || base_offset >= d_n {
            return Err(LabError::InvalidConfig(format!(
                "base offset {base_offset} must lie strictly inside (0, {d_n})"
            )));
        }
        Ok(WindowFrame {
            start: CirclePoint::new(Scalar::zero(prec)),
            base: CirclePoint::new(base_offset),
            end: CirclePoint::new(d_n.clone()),
            qn,
            qn_prev,
            d_n,
        })
    }

    pub fn window_arc(&self) -> Result<Arc> {
        Arc::new(self.start.clone(), self.end.clone())
    }

    /// Counterclockwise offset of a point from the window start.
    pub fn offset_of(&self, p: &CirclePoint) -> Scalar {
        self.start.ccw_dist(p)
    }
}

/// Compute the level-n window of `map` around `x0`.
///
/// The orientation x_{q_n} < x0 < x_{q_{n-1}} holds for odd n, where the
/// q_n-th closest return approaches the base from the left; even levels
/// are rejected so that window offsets always increase toward x_{q_{n-1}}.
pub fn window_frame(map: &dyn CircleMap, n: usize, x0: &CirclePoint) -> Result<WindowFrame> {
    if n < 2 {
        return Err(LabError::InvalidConfig(format!(
            "window level must be at least 2, got {n}"
        )));
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
    let start = map.iterate(x0, qn)?;
    let end = map.iterate(x0, qn_prev)?;
    if !crate::circle::ccw_ordered(&start, x0, &end) {
        return Err(LabError::InvalidConfig(format!(
            "window at level {n} is not oriented as [x_qn, x0, x_q(n-1)]; use an odd level"
        )));
    }
    let d_n = start.ccw_dist(&end);
    let half = Scalar::from_ratio(1, 2, d_n.prec());
    if d_n >= half {
        return Err(LabError::Precision(format!(
            "window length {d_n} at level {n} is not small; the rotation number may be poorly resolved"
        )));
    }
    Ok(WindowFrame {
        start,
        base: x0.clone(),
        end,
        qn,
        qn_prev,
        d_n,
    })
}

/// Which sub-arc of the window holds a preimage: left of the base point
/// or right of it.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum WindowSide {
    Left,
    Right,
}

/// The first backward iterate of a break point that lands in the window,
/// together with the entry time l: f^l(point) is the break itself.
#[derive(Clone, Debug)]
pub struct BreakPreimage {
    pub point: CirclePoint,
    pub source_break: crate::map::BreakSpec,
    pub break_index: usize,
    pub return_time: i64,
    pub side: WindowSide,
}

/// Locate the window preimage of every break point of `map`.
///
/// Entry times obey the tower heights of the window: a preimage on the
/// left sub-arc [x_{q_n}, x0) has l < q_{n-1}, one on the right sub-arc
/// [x0, x_{q_{n-1}}) has l < q_n. A break point lying inside the window
/// itself is rejected, since the window is then too coarse to separate
/// the break from its own preimage structure.
pub fn qn_preimages(
    map: &dyn CircleMap,
    n: usize,
    x0: &CirclePoint,
) -> Result<Vec<BreakPreimage>> {
    let frame = window_frame(map, n, x0)?;
    let window = frame.window_arc()?;
    for spec in map.breaks() {
        if window.contains_closed(&spec.location) {
            return Err(LabError::InvalidConfig(format!(
                "window [{}, {}] at level {n} contains the break point {}; move the base point or raise the level",
                frame.start, frame.end, spec.location
            )));
        }
    }
    let left = Arc::new(frame.start.clone(), frame.base.clone())?;
    let scan_limit = frame.qn + frame.qn_prev;
    let mut out = Vec::with_capacity(map.breaks().len());
    for (break_index, spec) in map.breaks().iter().enumerate() {
        let mut p = spec.location.clone();
        let mut entry = None;
        for l in 1..=scan_limit {
            p = map.apply_inverse(&p);
            if window.contains_half_open(&p) {
                entry = Some((p.clone(), l));
                break;
            }
        }
        let (point, return_time) = entry.ok_or_else(|| {
            LabError::Precision(format!(
                "backward orbit of break {} missed the level-{n} window within {scan_limit} steps",
                spec.location
            ))
        })?;
        let side = if left.contains_half_open(&point) {
            WindowSide::Left
        } else {
            WindowSide::Right
        };
        let bound = match side {
            WindowSide::Left => frame.qn_prev,
            WindowSide::Right => frame.qn,
        };
        if return_time >= bound {
            return Err(LabError::Precision(format!(
                "entry time {return_time} of break {} exceeds the tower height {bound} on its side",
                spec.location
            )));
        }
        out.push(BreakPreimage {
            point,
            source_break: spec.clone(),
            break_index,
            return_time,
            side,
        });
    }
    Ok(out)
}

/// The three orbit points that anchor the window.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum AnchorKind {
    WindowStart,
    Base,
    WindowEnd,
}

/// Provenance of one break-set element.
#[derive(Clone, Debug)]
pub enum ElementTag {
    Anchor(AnchorKind),
    /// Window preimage of a break of the first map.
    MapOne {
        break_index: usize,
        jump: Scalar,
        return_time: i64,
    },
    /// Window preimage of a break of the second map, pulled back to the
    /// first circle through the conjugacy.
    MapTwo {
        break_index: usize,
        jump: Scalar,
        return_time: i64,
    },
}

/// One point of the combined break set. Coincident points merge, so a
/// single element can carry several tags.
#[derive(Clone, Debug)]
pub struct BreakSetElement {
    pub point: CirclePoint,
    pub offset: Scalar,
    pub tags: Vec<ElementTag>,
}

impl BreakSetElement {
    pub fn is_anchor(&self) -> bool {
        self.tags.iter().any(|t| matches!(t, ElementTag::Anchor(_)))
    }

    pub fn anchor_kind(&self) -> Option<AnchorKind> {
        self.tags.iter().find_map(|t| match t {
            ElementTag::Anchor(k) => Some(*k),
            _ => None,
        })
    }
}

/// The combined break set of a conjugate pair over one window: the three
/// anchors, the first map's break preimages, and the second map's break
/// preimages pulled back to the first circle.
#[derive(Clone, Debug)]
pub struct BreakSet {
    frame: WindowFrame,
    elements: Vec<BreakSetElement>,
    m1: usize,
    m2: usize,
}

impl BreakSet {
    /// Assemble a break set from explicit entries. Anchors are added
    /// automatically; entries supply the preimage tags with their window
    /// offsets. Used directly by grid and search tests.
    pub fn synthetic(frame: WindowFrame, entries: Vec<(Scalar, ElementTag)>) -> Result<BreakSet> {
        let prec = frame.d_n.prec();
        let mut raw: Vec<(Scalar, ElementTag)> = vec![
            (Scalar::zero(prec), ElementTag::Anchor(AnchorKind::WindowStart)),
            (
                frame.offset_of(&frame.base),
                ElementTag::Anchor(AnchorKind::Base),
            ),
            (frame.d_n.clone(), ElementTag::Anchor(AnchorKind::WindowEnd)),
        ];
        for (offset, tag) in entries {
            if matches!(tag, ElementTag::Anchor(_)) {
                return Err(LabError::InvalidConfig(
                    "anchor tags are added automatically; supply only preimage entries".into(),
                ));
            }
            if offset < Scalar::zero(prec) || offset > frame.d_n {
                return Err(LabError::InvalidConfig(format!(
                    "entry offset {offset} lies outside the window [0, {}]",
                    frame.d_n
                )));
            }
            raw.push((offset, tag));
        }
        Self::from_raw(frame, raw)
    }

    fn from_raw(frame: WindowFrame, mut raw: Vec<(Scalar, ElementTag)>) -> Result<BreakSet> {
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut elements: Vec<BreakSetElement> = Vec::new();
        for (offset, tag) in raw {
            match elements.last_mut() {
                Some(last) if last.offset == offset => last.tags.push(tag),
                _ => {
                    let point = frame.start.translate(&offset);
                    elements.push(BreakSetElement {
                        point,
                        offset,
                        tags: vec![tag],
                    });
                }
            }
        }
        let m1 = elements
            .iter()
            .flat_map(|e| e.tags.iter())
            .filter(|t| matches!(t, ElementTag::MapOne { .. }))
            .count();
        let m2 = elements
            .iter()
            .flat_map(|e| e.tags.iter())
            .filter(|t| matches!(t, ElementTag::MapTwo { .. }))
            .count();
        if elements.len() > m1 + m2 + 3 {
            return Err(LabError::Precision(format!(
                "break set has {} points but at most {} are possible",
                elements.len(),
                m1 + m2 + 3
            )));
        }
        Ok(BreakSet {
            frame,
            elements,
            m1,
            m2,
        })
    }

    pub fn frame(&self) -> &WindowFrame {
        &self.frame
    }

    pub fn elements(&self) -> &[BreakSetElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Number of preimage tags from each map.
    pub fn break_counts(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }

    pub fn d_n(&self) -> &Scalar {
        &self.frame.d_n
    }

    /// Index of the element carrying an anchor tag.
    pub fn anchor_element(&self, kind: AnchorKind) -> usize {
        self.elements
            .iter()
            .position(|e| e.anchor_kind() == Some(kind))
            .expect("anchors are always present")
    }

    /// Jump products of the two maps over a set of element indices. An
    /// empty selection yields the empty product 1.
    pub fn products(&self, members: &[usize]) -> (Scalar, Scalar) {
        let prec = self.frame.d_n.prec();
        let mut p1 = Scalar::one(prec);
        let mut p2 = Scalar::one(prec);
        for &i in members {
            for tag in &self.elements[i].tags {
                match tag {
                    ElementTag::MapOne { jump, .. } => p1 = &p1 * jump,
                    ElementTag::MapTwo { jump, .. } => p2 = &p2 * jump,
                    ElementTag::Anchor(_) => {}
                }
            }
        }
        (p1, p2)
    }

    /// Jump products over the whole set; equal to the maps' total jumps
    /// when every break contributed exactly one preimage.
    pub fn total_products(&self) -> (Scalar, Scalar) {
        let all: Vec<usize> = (0..self.elements.len()).collect();
        self.products(&all)
    }
}

/// How the second circle is reached: through the interpolated conjugacy
/// table, or through a closed-form diffeomorphism when the pair was built
/// as psi . f . psi^{-1}.
#[derive(Clone, Copy)]
pub struct ConjugacyOracle<'a> {
    pub table: &'a ConjugacyApprox,
    pub exact: Option<&'a SineDiffeo>,
}

impl<'a> ConjugacyOracle<'a> {
    pub fn from_table(table: &'a ConjugacyApprox) -> ConjugacyOracle<'a> {
        ConjugacyOracle { table, exact: None }
    }

    pub fn with_exact(table: &'a ConjugacyApprox, psi: &'a SineDiffeo) -> ConjugacyOracle<'a> {
        ConjugacyOracle {
            table,
            exact: Some(psi),
        }
    }

    pub fn h(&self, x: &CirclePoint) -> CirclePoint {
        match self.exact {
            Some(psi) => psi.apply(x),
            None => eval_h(self.table, x),
        }
    }

    pub fn h_inverse(&self, t: &CirclePoint) -> CirclePoint {
        match self.exact {
            Some(psi) => psi.apply_inverse(t),
            None => eval_h_inverse(self.table, t),
        }
    }

    pub fn is_exact(&self) -> bool {
        self.exact.is_some()
    }

    /// Positional uncertainty of interpolated values: zero for the exact
    /// oracle, the coarser table gap otherwise.
    pub fn resolution(&self) -> Scalar {
        if self.exact.is_some() {
            let prec = self.table.max_gap_x().prec();
            Scalar::zero(prec)
        } else {
            self.table.max_gap_x().max(self.table.max_gap_t())
        }
    }
}

/// Build the combined break set for a conjugate pair at level n.
///
/// Preimages of the second map are found in its own window around
/// t0 = h(x0) and pulled back through the conjugacy; interpolation error
/// of a table oracle therefore bounds the grid levels that can be
/// trusted downstream.
pub fn build_break_set(
    map1: &dyn CircleMap,
    map2: &dyn CircleMap,
    oracle: &ConjugacyOracle,
    n: usize,
    x0: &CirclePoint,
) -> Result<BreakSet> {
    let (tx0, tt0) = oracle.table.base();
    if tx0.position() != x0.position() {
        return Err(LabError::InvalidConfig(format!(
            "conjugacy table is anchored at {}, not at the requested base {x0}",
            tx0
        )));
    }
    let frame = window_frame(map1, n, x0)?;
    let frame2 = window_frame(map2, n, tt0)?;
    if frame.qn != frame2.qn || frame.qn_prev != frame2.qn_prev {
        return Err(LabError::InvalidConfig(format!(
            "maps disagree on the closest-return denominators at level {n}: ({}, {}) vs ({}, {})",
            frame.qn_prev, frame.qn, frame2.qn_prev, frame2.qn
        )));
    }
    let window = frame.window_arc()?;

    let mut raw: Vec<(Scalar, ElementTag)> = vec![
        (
            Scalar::zero(frame.d_n.prec()),
            ElementTag::Anchor(AnchorKind::WindowStart),
        ),
        (
            frame.offset_of(&frame.base),
            ElementTag::Anchor(AnchorKind::Base),
        ),
        (
            frame.d_n.clone(),
            ElementTag::Anchor(AnchorKind::WindowEnd),
        ),
    ];
    for pre in qn_preimages(map1, n, x0)? {
        raw.push((
            frame.offset_of(&pre.point),
            ElementTag::MapOne {
                break_index: pre.break_index,
                jump: pre.source_break.jump.clone(),
                return_time: pre.return_time,
            },
        ));
    }
    // A pulled-back point carries the round-trip error of the oracle, so a
    // control pair whose break orbits coincide would yield two elements a
    // few ulps apart and the grid would keep splitting them at ever finer
    // levels. Snap a pulled offset onto the nearest directly computed one
    // when they agree to working precision.
    let direct = raw.len();
    let snap_tol = Scalar::from_f64(256.0 * frame.d_n.prec().epsilon(), frame.d_n.prec());
    for pre in qn_preimages(map2, n, tt0)? {
        let pulled = oracle.h_inverse(&pre.point);
        if !window.contains_closed(&pulled) {
            return Err(LabError::Precision(format!(
                "pulled-back preimage {pulled} of break {} lands outside the window; conjugacy resolution {} is too coarse for level {n}",
                pre.source_break.location,
                oracle.resolution()
            )));
        }
        let mut offset = frame.offset_of(&pulled);
        let mut best: Option<(Scalar, Scalar)> = None;
        for (o, _) in &raw[..direct] {
            let dist = (&offset - o).abs();
            if dist <= snap_tol && best.as_ref().map_or(true, |(b, _)| &dist < b) {
                best = Some((dist, o.clone()));
            }
        }
        if let Some((_, o)) = best {
            offset = o;
        }
        raw.push((
            offset,
            ElementTag::MapTwo {
                break_index: pre.break_index,
                jump: pre.source_break.jump.clone(),
                return_time: pre.return_time,
            },
        ));
    }
    BreakSet::from_raw(frame, raw)
}

/// Grid base m0 for a pair: large enough that the break set cannot fill a
/// level-0 grid, that m0 > M/zeta, and that one grid step dominates the
/// derivative bounds e^{v_i} of both maps.
pub fn default_m0(
    m1: usize,
    m2: usize,
    m_big: &Scalar,
    zeta: &Scalar,
    v1: &Scalar,
    v2: &Scalar,
) -> Result<u32> {
    let prec = m_big.prec();
    if *m_big < Scalar::one(prec) {
        return Err(LabError::InvalidConfig(format!(
            "comparability constant M must be at least 1, got {m_big}"
        )));
    }
    if *zeta <= Scalar::zero(prec) || *zeta >= Scalar::one(prec) {
        return Err(LabError::InvalidConfig(format!(
            "zeta must lie in (0, 1), got {zeta}"
        )));
    }
    let from_cardinality = (m1 + m2 + 4) as i64;
    let from_zeta = (m_big / zeta).floor_i64() + 1;
    let from_v1 = v1.exp().floor_i64() + 1;
    let from_v2 = v2.exp().floor_i64() + 1;
    let m0 = from_cardinality.max(from_zeta).max(from_v1).max(from_v2);
    u32::try_from(m0).map_err(|_| {
        LabError::InvalidConfig(format!("grid base {m0} does not fit in 32 bits"))
    })
}

/// The level-l grid over the window: m0^(l+1) equal cells. Only the cell
/// indices of the break-set elements are materialized; cell counts at
/// deep levels exceed machine integers, so indices are exact big
/// integers computed rationally.
#[derive(Clone, Debug)]
pub struct GridPartition {
    level: u32,
    m0: u32,
    cell_count: Integer,
    cell_length: Scalar,
    element_cells: Vec<Integer>,
}

impl GridPartition {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn m0(&self) -> u32 {
        self.m0
    }

    pub fn cell_count(&self) -> &Integer {
        &self.cell_count
    }

    pub fn cell_length(&self) -> &Scalar {
        &self.cell_length
    }

    /// Cell index of each break-set element, in element order.
    pub fn element_cells(&self) -> &[Integer] {
        &self.element_cells
    }

    /// Dense occupancy flags, when the grid is small enough to list.
    pub fn dense_occupancy(&self, max_cells: usize) -> Option<Vec<bool>> {
        let count = self.cell_count.to_usize()?;
        if count > max_cells {
            return None;
        }
        let mut flags = vec![false; count];
        for cell in &self.element_cells {
            flags[cell.to_usize().expect("cell fits when the grid fits")] = true;
        }
        Some(flags)
    }
}

/// One cluster: a maximal run of break-set elements with no empty grid
/// cell between consecutive members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cluster {
    pub members: Vec<usize>,
}

/// The empty-cell gap separating two consecutive clusters.
#[derive(Clone, Debug)]
pub struct GapInterval {
    /// Index of the cluster to the left of the gap.
    pub left_cluster: usize,
    pub empty_cells: Integer,
    pub length: Scalar,
}

/// Clusters and gaps of the break set at one grid level.
#[derive(Clone, Debug)]
pub struct ClusterPartition {
    pub clusters: Vec<Cluster>,
    pub gaps: Vec<GapInterval>,
}

impl ClusterPartition {
    pub fn count(&self) -> usize {
        self.clusters.len()
    }

    /// Index of the cluster containing a given element.
    pub fn cluster_of(&self, element: usize) -> usize {
        self.clusters
            .iter()
            .position(|c| c.members.contains(&element))
            .expect("every element belongs to a cluster")
    }
}

fn integer_to_scalar(i: &Integer, prec: Precision) -> Scalar {
    if prec == Precision::DOUBLE {
        Scalar::from_f64(i.to_f64(), prec)
    } else {
        Scalar::Big(rug::Float::with_val(prec.bits(), i))
    }
}

/// Exact cell index floor(offset * m0^(l+1) / d_n). A point exactly on a
/// cell boundary lands in the cell to its right; the window end, which
/// has no right cell, lands in the last cell.
fn cell_index(offset: &Scalar, d_n: &Scalar, cells: &Integer) -> Integer {
    let scaled = Rational::from(offset.to_rational() * cells) / d_n.to_rational();
    let mut idx = scaled.floor().into_numer_denom().0;
    if idx == *cells {
        idx -= 1;
    }
    idx
}

/// Grid the break set at one level and read off its cluster structure.
pub fn grid_clusters(
    bset: &BreakSet,
    m0: u32,
    level: u32,
) -> Result<(GridPartition, ClusterPartition)> {
    let (m1, m2) = bset.break_counts();
    let floor = (m1 + m2 + 4) as u32;
    if m0 < floor {
        return Err(LabError::InvalidConfig(format!(
            "grid base {m0} is below the cardinality floor {floor}"
        )));
    }
    let prec = bset.d_n().prec();
    let cell_count = Integer::from(m0).pow(level + 1);
    let cell_length = bset.d_n() / &integer_to_scalar(&cell_count, prec);
    let element_cells: Vec<Integer> = bset
        .elements()
        .iter()
        .map(|e| cell_index(&e.offset, bset.d_n(), &cell_count))
        .collect();

    let mut clusters: Vec<Cluster> = Vec::new();
    let mut gaps: Vec<GapInterval> = Vec::new();
    for (i, cell) in element_cells.iter().enumerate() {
        let split = match i {
            0 => true,
            _ => Integer::from(cell - &element_cells[i - 1]) > 1,
        };
        if split {
            if let Some(prev) = clusters.last() {
                let prev_cell = &element_cells[*prev.members.last().unwrap()];
                let empty = Integer::from(cell - prev_cell) - Integer::from(1);
                let length = &integer_to_scalar(&empty, prec) * &cell_length;
                gaps.push(GapInterval {
                    left_cluster: clusters.len() - 1,
                    empty_cells: empty,
                    length,
                });
            }
            clusters.push(Cluster { members: vec![i] });
        } else {
            clusters.last_mut().unwrap().members.push(i);
        }
    }
    Ok((
        GridPartition {
            level,
            m0,
            cell_count,
            cell_length,
            element_cells,
        },
        ClusterPartition { clusters, gaps },
    ))
}

/// Result of the stable-level search: the first level s0 in the scan
/// {0, r, 2r, ...} whose cluster count repeats one stride later, with the
/// distance claims verified and a jump-discriminating cluster selected.
#[derive(Clone, Debug)]
pub struct TheoremSearch {
    pub s0: u32,
    pub r: u32,
    pub grid: GridPartition,
    pub clusters: ClusterPartition,
    /// Per-cluster jump products of the two maps.
    pub products: Vec<(Scalar, Scalar)>,
    /// Per-cluster flag: the two products differ beyond rounding.
    pub differs: Vec<bool>,
    /// Per-cluster flag: the cluster can pivot a cover. These are the
    /// differing clusters when any exist, otherwise the break-carrying
    /// ones (the relaxed mode used for jump-coinciding control pairs).
    pub qualifying: Vec<bool>,
    /// Leftmost qualifying cluster.
    pub selected: usize,
}

fn products_differ(p1: &Scalar, p2: &Scalar) -> bool {
    let prec = p1.prec().max(p2.prec());
    let eps = Scalar::from_f64(64.0 * prec.epsilon(), prec);
    let scale = p1.abs().max(&p2.abs()).max(&Scalar::one(prec));
    (p1 - p2).abs() > &eps * &scale
}

/// Pigeonhole search for a stable grid level.
///
/// Cluster counts never decrease under refinement and are bounded by the
/// break-set cardinality, so some level s0 = r*t with t <= m1+m2+1 has
/// |clusters(s0)| = |clusters(s0+r)|. At that level every cluster has
/// diameter at most 2 m0^-(s0+r) d_n, consecutive clusters are separated
/// by at least one empty s0-cell (length m0^-(s0+1) d_n), and, because
/// the total jump products differ, some cluster's products differ. Both
/// distance claims are re-checked here in exact rational arithmetic.
pub fn theorem31_search(bset: &BreakSet, m0: u32, r: u32) -> Result<TheoremSearch> {
    let (t1, t2) = bset.total_products();
    if !products_differ(&t1, &t2) {
        return Err(LabError::InvalidConfig(format!(
            "total jump products coincide ({t1} vs {t2}); the stable-level search needs differing totals"
        )));
    }
    stable_level_search(bset, m0, r, true)
}

/// The search behind `theorem31_search`. With `require_differing` off,
/// a break set whose cluster products all coincide still selects a
/// cluster (the leftmost one carrying any break), so that control pairs
/// with equal total jumps can be covered and measured.
fn stable_level_search(
    bset: &BreakSet,
    m0: u32,
    r: u32,
    require_differing: bool,
) -> Result<TheoremSearch> {
    if r == 0 {
        return Err(LabError::InvalidConfig("search stride must be positive".into()));
    }
    let (m1, m2) = bset.break_counts();

    let mut current = grid_clusters(bset, m0, 0)?;
    let mut s0 = None;
    for t in 0..=(m1 + m2 + 1) as u32 {
        let level = r * t;
        let next = grid_clusters(bset, m0, level + r)?;
        if next.1.count() < current.1.count() {
            return Err(LabError::Precision(format!(
                "cluster count dropped from {} to {} when refining level {level}; grid indices are inconsistent",
                current.1.count(),
                next.1.count()
            )));
        }
        if next.1.count() == current.1.count() {
            s0 = Some((level, current));
            break;
        }
        current = next;
    }
    let (s0, (grid, clusters)) = s0.ok_or_else(|| {
        LabError::Precision(
            "no stable level found although cluster counts are bounded; grid indices are inconsistent"
                .into(),
        )
    })?;

    let dn_rat = bset.d_n().to_rational();
    let diameter_bound = Rational::from(2) * &dn_rat / Integer::from(m0).pow(s0 + r);
    for cluster in &clusters.clusters {
        let first = &bset.elements()[*cluster.members.first().unwrap()].offset;
        let last = &bset.elements()[*cluster.members.last().unwrap()].offset;
        let diameter = last.to_rational() - first.to_rational();
        if diameter > diameter_bound {
            return Err(LabError::Precision(format!(
                "cluster diameter {} exceeds the stable-level bound {} at level {s0}",
                diameter.to_f64(),
                diameter_bound.to_f64()
            )));
        }
    }
    let gap_bound = dn_rat / Integer::from(m0).pow(s0 + 1);
    for gap in &clusters.gaps {
        let left = &bset.elements()
            [*clusters.clusters[gap.left_cluster].members.last().unwrap()]
        .offset;
        let right = &bset.elements()
            [*clusters.clusters[gap.left_cluster + 1].members.first().unwrap()]
        .offset;
        let dist = right.to_rational() - left.to_rational();
        if dist < gap_bound {
            return Err(LabError::Precision(format!(
                "inter-cluster distance {} is below one empty cell {} at level {s0}",
                dist.to_f64(),
                gap_bound.to_f64()
            )));
        }
    }

    let products: Vec<(Scalar, Scalar)> = clusters
        .clusters
        .iter()
        .map(|c| bset.products(&c.members))
        .collect();
    let differs: Vec<bool> = products.iter().map(|(a, b)| products_differ(a, b)).collect();
    let qualifying: Vec<bool> = if differs.iter().any(|&d| d) {
        differs.clone()
    } else if require_differing {
        return Err(LabError::InvalidConfig(
            "every cluster has coinciding jump products, yet the totals differ; cluster products multiply to the totals, so this cannot happen"
                .into(),
        ));
    } else {
        clusters
            .clusters
            .iter()
            .map(|c| {
                c.members.iter().any(|&e| {
                    bset.elements()[e]
                        .tags
                        .iter()
                        .any(|t| !matches!(t, ElementTag::Anchor(_)))
                })
            })
            .collect()
    };
    let selected = qualifying.iter().position(|&q| q).ok_or_else(|| {
        LabError::InvalidConfig("the break set carries no jumps; nothing to cover".into())
    })?;

    Ok(TheoremSearch {
        s0,
        r,
        grid,
        clusters,
        products,
        differs,
        qualifying,
        selected,
    })
}

/// Constants steering the cover construction. `k_big` defaults to
/// max(m0 e^{2(v1+v2)}, m0^{s0+7}) when not overridden; `m0_override`
/// may only raise the grid base above its formula value.
#[derive(Clone, Debug)]
pub struct CoverConstants {
    pub m_big: Scalar,
    pub zeta: Scalar,
    pub delta: Scalar,
    pub k_override: Option<Scalar>,
    pub m0_override: Option<u32>,
    /// Step r of the stable-level scan.
    pub search_step: u32,
}

impl CoverConstants {
    /// M = 3, zeta = 1/2, delta = 1/10, r = 9, derived K and m0.
    pub fn standard(prec: Precision) -> CoverConstants {
        CoverConstants {
            m_big: Scalar::from_i64(3, prec),
            zeta: Scalar::from_ratio(1, 2, prec),
            delta: Scalar::from_ratio(1, 10, prec),
            k_override: None,
            m0_override: None,
            search_step: COVER_SEARCH_STEP,
        }
    }
}

/// Which construction produced the cover, by the anchor content of the
/// jump-discriminating cluster: none (C1), one anchor (C2, merged around
/// the base by pulling the anchor clusters back), or the window start
/// clustered with the base (C3, merged with the split far cluster).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum CoverCase {
    C1,
    C2,
    C3,
}

/// Verification of the six cover conditions on one circle.
#[derive(Clone, Debug, Serialize)]
pub struct SideConditions {
    /// False when this side's break subset is empty; an empty side has
    /// nothing to cover and its conditions are not required.
    pub required: bool,
    /// Conditions 1..6: containment plus single coverage; preimages in
    /// [z1, z2]; middle-interval comparability; comparability of the
    /// iterated intervals; anchor proximity; preimages near z2.
    pub holds: [bool; 6],
    /// Worst distance of a cover point from the anchor, against delta.
    pub delta_margin: f64,
    /// Coverage count of each subset break over the r_n iterates.
    pub coverage_counts: Vec<usize>,
    /// Iterates of [z1, z4] hitting breaks outside the subset.
    pub foreign_hits: usize,
    pub ratio_23_over_12: f64,
    pub ratio_23_over_34: f64,
    /// Worst pairwise comparability ratio of the iterated intervals.
    pub image_ratio_worst: f64,
    /// Worst anchor distance in units of the first interval length.
    pub anchor_bound_ratio: f64,
    /// Worst relative position of a subset preimage, against zeta.
    pub zeta_measured: f64,
    /// Worst drift |ln xi(l)/xi(0)| and |ln z(l)/z(0)| at the covered
    /// steps, against the variation of ln Df.
    pub ratio_drift: f64,
    pub ratio_drift_ok: bool,
}

fn verify_side(
    map: &dyn CircleMap,
    anchor: &CirclePoint,
    points: &[CirclePoint; 4],
    subset: &[usize],
    rn: i64,
    k_big: &Scalar,
    m_big: &Scalar,
    zeta: &Scalar,
    delta: &Scalar,
) -> Result<SideConditions> {
    let prec = map.precision();
    let zero = Scalar::zero(prec);
    let base = &points[0];
    let off: Vec<Scalar> = points.iter().map(|p| base.ccw_dist(p)).collect();
    if !(off[1] > zero && off[2] > off[1] && off[3] > off[2]) {
        return Err(LabError::Precision(
            "cover points are not in strict circular order".into(),
        ));
    }
    let l12 = &off[1];
    let l23 = &(&off[2] - &off[1]);
    let l34 = &(&off[3] - &off[2]);

    // Forward orbits of the four points, one pass of r_n iterates.
    let steps = usize::try_from(rn)
        .map_err(|_| LabError::InvalidConfig(format!("negative iterate count {rn}")))?;
    let mut orbits: Vec<Vec<CirclePoint>> = Vec::with_capacity(4);
    for p in points.iter() {
        let mut orbit = Vec::with_capacity(steps + 1);
        orbit.push(p.clone());
        for j in 0..steps {
            let next = map.apply(&orbit[j]);
            orbit.push(next);
        }
        orbits.push(orbit);
    }

    let span = Arc::new(points[0].clone(), points[3].clone())?;
    let mut coverage_counts = Vec::with_capacity(subset.len());
    let mut hits: Vec<Option<(i64, CirclePoint)>> = Vec::with_capacity(subset.len());
    let mut foreign_hits = 0usize;
    for (bi, spec) in map.breaks().iter().enumerate() {
        let mut count = 0usize;
        let mut first = None;
        let mut p = spec.location.clone();
        for l in 0..rn {
            if l > 0 {
                p = map.apply_inverse(&p);
            }
            if span.contains_closed(&p) {
                count += 1;
                if first.is_none() {
                    first = Some((l, p.clone()));
                }
            }
        }
        if subset.contains(&bi) {
            coverage_counts.push(count);
            hits.push(first);
        } else {
            foreign_hits += count;
        }
    }

    let delta_margin = points
        .iter()
        .map(|p| circular_distance(p, anchor))
        .fold(zero.clone(), |acc, d| acc.max(&d));
    let cond1 = delta_margin < *delta && coverage_counts.iter().all(|&c| c == 1);

    let cond2 = hits.iter().all(|h| match h {
        Some((_, p)) => base.ccw_dist(p) <= *l12,
        None => false,
    }) || subset.is_empty();

    let cond3 = &(m_big * l12) <= l23
        && l23 <= &(k_big * l12)
        && &(l34 / k_big) <= l23
        && l23 <= &(k_big * l34);

    let image_lengths: Vec<Scalar> = (0..3)
        .map(|s| orbits[s][steps].ccw_dist(&orbits[s + 1][steps]))
        .collect();
    let mut image_ratio_worst = Scalar::one(prec);
    for a in 0..3 {
        for b in (a + 1)..3 {
            if image_lengths[a].is_zero() || image_lengths[b].is_zero() {
                return Err(LabError::Precision(
                    "iterated cover interval collapsed at working precision".into(),
                ));
            }
            let r = &image_lengths[a] / &image_lengths[b];
            image_ratio_worst = image_ratio_worst.max(&r).max(&r.recip());
        }
    }
    let cond4 = image_ratio_worst <= *k_big;

    let anchor_dist = points
        .iter()
        .map(|p| circular_distance(p, anchor))
        .chain((0..4).map(|i| circular_distance(&orbits[i][steps], anchor)))
        .fold(zero.clone(), |acc, d| acc.max(&d));
    let anchor_bound_ratio = &anchor_dist / l12;
    let cond5 = anchor_dist <= k_big * l12;

    let mut zeta_measured = zero.clone();
    for h in hits.iter().flatten() {
        let rel = &h.1.ccw_dist(&points[1]) / l12;
        zeta_measured = zeta_measured.max(&rel);
    }
    let cond6 = subset.is_empty() || zeta_measured < *zeta;

    // Drift of the comparison ratios between entry time and time zero,
    // bounded by the variation of ln Df along disjoint iterates.
    let v = map.variation_log_df();
    let xi0 = l23 / l12;
    let mut drift = 0.0f64;
    for h in hits.iter().flatten() {
        let (l, p) = h;
        let j = usize::try_from(*l).expect("entry times fit");
        let a = orbits[0][j].ccw_dist(&orbits[1][j]);
        let b = orbits[1][j].ccw_dist(&orbits[2][j]);
        if a.is_zero() {
            continue;
        }
        let xi_j = &b / &a;
        drift = drift.max((xi_j.ln_f64() - xi0.ln_f64()).abs());
        let z0 = &p.ccw_dist(&points[1]) / l12;
        if !z0.is_zero() {
            let pj = map.iterate(p, *l)?;
            let zj = &pj.ccw_dist(&orbits[1][j]) / &a;
            if !zj.is_zero() {
                drift = drift.max((zj.ln_f64() - z0.ln_f64()).abs());
            }
        }
    }
    let ratio_drift_ok = drift <= v.to_f64() + 1e-9;

    Ok(SideConditions {
        required: !subset.is_empty(),
        holds: [cond1, cond2, cond3, cond4, cond5, cond6],
        delta_margin: delta_margin.to_f64(),
        coverage_counts,
        foreign_hits,
        ratio_23_over_12: (l23 / l12).to_f64(),
        ratio_23_over_34: (l23 / l34).to_f64(),
        image_ratio_worst: image_ratio_worst.to_f64(),
        anchor_bound_ratio: anchor_bound_ratio.to_f64(),
        zeta_measured: zeta_measured.to_f64(),
        ratio_drift: drift,
        ratio_drift_ok,
    })
}

/// A constructed cover: the four points on the first circle, their
/// conjugacy images, the iterate count, and the verified conditions on
/// both circles.
#[derive(Clone, Debug)]
pub struct CoverReport {
    pub n: usize,
    pub rn: i64,
    pub case: CoverCase,
    pub m0: u32,
    pub s0: u32,
    pub z: [CirclePoint; 4],
    pub w: [CirclePoint; 4],
    /// True when the second circle was reached through a closed-form
    /// conjugacy rather than table interpolation.
    pub h_exact: bool,
    /// Positional uncertainty of the w points.
    pub h_resolution: Scalar,
    /// Break indices of the two maps selected for the cover.
    pub subset1: Vec<usize>,
    pub subset2: Vec<usize>,
    pub product1: Scalar,
    pub product2: Scalar,
    pub side1: SideConditions,
    pub side2: SideConditions,
    pub k_used: Scalar,
    pub m_used: Scalar,
    pub zeta_used: Scalar,
    pub delta_used: Scalar,
}

impl CoverReport {
    /// True when every required side satisfies all six conditions.
    pub fn all_conditions_hold(&self) -> bool {
        let side_ok =
            |s: &SideConditions| !s.required || s.holds.iter().all(|&h| h);
        side_ok(&self.side1) && side_ok(&self.side2)
    }

    /// True when the covered jump products coincide, so the distortion
    /// gap carries no lower bound.
    pub fn bound_is_degenerate(&self) -> bool {
        distortion_gap_bound(&self.product1, &self.product2).is_zero()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n,
            "rn": self.rn,
            "case": self.case,
            "m0": self.m0,
            "s0": self.s0,
            "z": self.z.iter().map(|p| p.to_f64()).collect::<Vec<_>>(),
            "w": self.w.iter().map(|p| p.to_f64()).collect::<Vec<_>>(),
            "h_exact": self.h_exact,
            "h_resolution": self.h_resolution.to_f64(),
            "subset1": self.subset1,
            "subset2": self.subset2,
            "product1": self.product1.to_f64(),
            "product2": self.product2.to_f64(),
            "side1": self.side1,
            "side2": self.side2,
            "k": self.k_used.to_f64(),
            "m": self.m_used.to_f64(),
            "zeta": self.zeta_used.to_f64(),
            "delta": self.delta_used.to_f64(),
            "all_conditions_hold": self.all_conditions_hold(),
        })
    }
}

/// The geometric plan for a cover: case, iterate count, the four points,
/// and the elements whose breaks form the covered subsets.
struct CoverPlan {
    case: CoverCase,
    rn: i64,
    z: [CirclePoint; 4],
    subset_elements: Vec<usize>,
}

/// Scale factors of the three cover offsets, in units of d_n m0^-s0:
/// [z1 gap, z2..z3 gap, z3..z4 gap].
fn case_offsets(case: CoverCase, m0: u32, s0: u32, d_n: &Scalar) -> [Scalar; 3] {
    let prec = d_n.prec();
    let pow = |e: u32| {
        let p = integer_to_scalar(&Integer::from(m0).pow(s0 + e), prec);
        d_n / &p
    };
    let two = Scalar::from_i64(2, prec);
    match case {
        CoverCase::C1 => [pow(7), pow(6), pow(7)],
        CoverCase::C2 => [pow(6), pow(3), pow(6)],
        CoverCase::C3 => [&two * &pow(6), &two * &pow(4), &two * &pow(6)],
    }
}

fn plan_cover(
    bset: &BreakSet,
    search: &TheoremSearch,
    map1: &dyn CircleMap,
) -> Result<CoverPlan> {
    let frame = bset.frame();
    let clusters = &search.clusters;

    let anchor_free: Option<usize> = (0..clusters.count()).find(|&c| {
        search.qualifying[c]
            && clusters.clusters[c]
                .members
                .iter()
                .all(|&e| !bset.elements()[e].is_anchor())
    });

    let start_cluster = clusters.cluster_of(bset.anchor_element(AnchorKind::WindowStart));
    let base_cluster = clusters.cluster_of(bset.anchor_element(AnchorKind::Base));
    let end_cluster = clusters.cluster_of(bset.anchor_element(AnchorKind::WindowEnd));

    let (case, rn, subset_elements, pivot_points): (CoverCase, i64, Vec<usize>, Vec<CirclePoint>) =
        if let Some(c) = anchor_free {
            let members = clusters.clusters[c].members.clone();
            let points = members
                .iter()
                .map(|&e| bset.elements()[e].point.clone())
                .collect();
            (CoverCase::C1, frame.qn, members, points)
        } else {
            if base_cluster == end_cluster {
                return Err(LabError::Precision(
                    "the base point clustered with the window end; one grid step dominates e^v, so this configuration cannot be stable"
                        .into(),
                ));
            }
            if base_cluster == start_cluster {
                // The far cluster splits by entry time: members returning
                // within the long-tower window are pulled forward past the
                // window start, the early returners are pulled back to the
                // base; the base cluster stays in place.
                let lo = frame.qn - frame.qn_prev;
                let mut members = clusters.clusters[base_cluster].members.clone();
                let mut points: Vec<CirclePoint> = members
                    .iter()
                    .map(|&e| bset.elements()[e].point.clone())
                    .collect();
                for &e in &clusters.clusters[end_cluster].members {
                    let el = &bset.elements()[e];
                    if el.is_anchor() {
                        continue;
                    }
                    members.push(e);
                    let l = element_return_time(el)?;
                    if (lo..frame.qn_prev).contains(&l) {
                        points.push(map1.iterate(&el.point, lo)?);
                    } else if (1..lo).contains(&l) {
                        points.push(map1.iterate(&el.point, -frame.qn_prev)?);
                    } else {
                        return Err(LabError::Precision(format!(
                            "entry time {l} of a far-cluster element falls outside both pull windows (1..{lo}, {lo}..{})",
                            frame.qn_prev
                        )));
                    }
                }
                (CoverCase::C3, frame.qn, members, points)
            } else {
                let mut members = Vec::new();
                let mut points = Vec::new();
                for (cluster, pull) in [
                    (start_cluster, -frame.qn),
                    (base_cluster, 0),
                    (end_cluster, -frame.qn_prev),
                ] {
                    for &e in &clusters.clusters[cluster].members {
                        members.push(e);
                        let p = &bset.elements()[e].point;
                        points.push(if pull == 0 {
                            p.clone()
                        } else {
                            map1.iterate(p, pull)?
                        });
                    }
                }
                members.sort_unstable();
                members.dedup();
                (
                    CoverCase::C2,
                    frame.qn + frame.qn_prev,
                    members,
                    points,
                )
            }
        };

    // Pulled pivot points can land a hair to the left of the window
    // start, so the maximum is taken in the signed coordinate around it.
    let z2 = pivot_points
        .iter()
        .max_by(|a, b| {
            a.signed_offset(&frame.start)
                .total_cmp(&b.signed_offset(&frame.start))
        })
        .expect("cover pivot set is never empty")
        .clone();
    let offs = case_offsets(case, search.grid.m0(), search.s0, bset.d_n());
    let z1 = z2.translate(&-&offs[0]);
    let z3 = z2.translate(&offs[1]);
    let z4 = z3.translate(&offs[2]);

    Ok(CoverPlan {
        case,
        rn,
        z: [z1, z2, z3, z4],
        subset_elements,
    })
}

fn element_return_time(el: &BreakSetElement) -> Result<i64> {
    el.tags
        .iter()
        .find_map(|t| match t {
            ElementTag::MapOne { return_time, .. }
            | ElementTag::MapTwo { return_time, .. } => Some(*return_time),
            ElementTag::Anchor(_) => None,
        })
        .ok_or_else(|| {
            LabError::Precision("cluster element carries no entry time".into())
        })
}

/// Construct a cover at level n and verify its conditions on both
/// circles. Condition failures are diagnostic: the report records them
/// without aborting, so marginal levels stay inspectable.
pub fn regular_cover(
    map1: &dyn CircleMap,
    map2: &dyn CircleMap,
    oracle: &ConjugacyOracle,
    n: usize,
    x0: &CirclePoint,
    constants: &CoverConstants,
) -> Result<CoverReport> {
    let prec = map1.precision();
    let bset = build_break_set(map1, map2, oracle, n, x0)?;
    let (m1, m2) = bset.break_counts();
    let v1 = map1.variation_log_df();
    let v2 = map2.variation_log_df();
    let m0_formula = default_m0(m1, m2, &constants.m_big, &constants.zeta, &v1, &v2)?;
    let m0 = match constants.m0_override {
        Some(m) if m < m0_formula => {
            return Err(LabError::InvalidConfig(format!(
                "grid base override {m} is below the formula value {m0_formula}; overrides may only raise it"
            )));
        }
        Some(m) => m,
        None => m0_formula,
    };

    if constants.search_step == 0 {
        return Err(LabError::InvalidConfig(
            "stable-level search step must be at least 1".into(),
        ));
    }
    let search = stable_level_search(&bset, m0, constants.search_step, false)?;

    // One grid step must dominate the derivative bound, otherwise the
    // far-anchor exclusion used by the case analysis has no margin.
    let wall = integer_to_scalar(
        &(Integer::from(m0).pow(search.s0 + constants.search_step) - Integer::from(1)),
        prec,
    );
    if wall <= v1.exp() {
        return Err(LabError::Precision(format!(
            "grid base {m0} at stable level {} does not dominate e^v = {}; raise m0",
            search.s0,
            v1.exp()
        )));
    }

    let plan = plan_cover(&bset, &search, map1)?;

    let mut subset1: Vec<usize> = Vec::new();
    let mut subset2: Vec<usize> = Vec::new();
    for &e in &plan.subset_elements {
        for tag in &bset.elements()[e].tags {
            match tag {
                ElementTag::MapOne { break_index, .. } => subset1.push(*break_index),
                ElementTag::MapTwo { break_index, .. } => subset2.push(*break_index),
                ElementTag::Anchor(_) => {}
            }
        }
    }
    subset1.sort_unstable();
    subset2.sort_unstable();
    let (product1, product2) = bset.products(&plan.subset_elements);

    let k_used = match &constants.k_override {
        Some(k) => k.clone(),
        None => {
            let growth = integer_to_scalar(
                &Integer::from(m0).pow(search.s0 + 7),
                prec,
            );
            let two = Scalar::from_i64(2, prec);
            let base = &integer_to_scalar(&Integer::from(m0), prec)
                * &(&two * &(&v1 + &v2)).exp();
            base.max(&growth)
        }
    };

    let w = [
        oracle.h(&plan.z[0]),
        oracle.h(&plan.z[1]),
        oracle.h(&plan.z[2]),
        oracle.h(&plan.z[3]),
    ];
    let t0 = oracle.table.base().1.clone();

    let side1 = verify_side(
        map1,
        x0,
        &plan.z,
        &subset1,
        plan.rn,
        &k_used,
        &constants.m_big,
        &constants.zeta,
        &constants.delta,
    )?;
    let side2 = verify_side(
        map2,
        &t0,
        &w,
        &subset2,
        plan.rn,
        &k_used,
        &constants.m_big,
        &constants.zeta,
        &constants.delta,
    )?;

    Ok(CoverReport {
        n,
        rn: plan.rn,
        case: plan.case,
        m0,
        s0: search.s0,
        z: plan.z,
        w,
        h_exact: oracle.is_exact(),
        h_resolution: oracle.resolution(),
        subset1,
        subset2,
        product1,
        product2,
        side1,
        side2,
        k_used,
        m_used: constants.m_big.clone(),
        zeta_used: constants.zeta.clone(),
        delta_used: constants.delta.clone(),
    })
}

/// Lower bound for the distortion-ratio gap implied by the covered jump
/// products p1 and p2: with L = min(p1, p2, |p1 - p2|), the bound is
/// min(|4(p1-p2) - 2L| / (4 p2 + L), |4(p1-p2) + 2L| / (4 p2 - L)).
/// Coinciding products give 0: no separation is promised.
pub fn distortion_gap_bound(p1: &Scalar, p2: &Scalar) -> Scalar {
    let prec = p1.prec().max(p2.prec());
    let diff = p1 - p2;
    let lambda = p1.min(p2).min(&diff.abs());
    if lambda.is_zero() || diff.is_zero() {
        return Scalar::zero(prec);
    }
    let four = Scalar::from_i64(4, prec);
    let two = Scalar::from_i64(2, prec);
    let num1 = (&(&four * &diff) - &(&two * &lambda)).abs();
    let den1 = &(&four * p2) + &lambda;
    let num2 = (&(&four * &diff) + &(&two * &lambda)).abs();
    let den2 = &(&four * p2) - &lambda;
    (&num1 / &den1).min(&(&num2 / &den2))
}

/// Measured distortion ratio of a cover against its promised bound.
#[derive(Clone, Debug)]
pub struct DistortionGap {
    /// |dist1 / dist2 - 1|.
    pub gap: Scalar,
    /// Lower bound from the covered jump products; 0 when they coincide.
    pub bound: Scalar,
    pub dist1: Scalar,
    pub dist2: Scalar,
}

/// Iterate both cover quadruples r_n times and compare their cross-ratio
/// distortions. For a valid cover of subsets with differing products the
/// gap meets `distortion_gap_bound`; a jump-coinciding control pair
/// drives it toward zero instead.
pub fn distortion_gap_experiment(
    map1: &dyn CircleMap,
    map2: &dyn CircleMap,
    cover: &CoverReport,
) -> Result<DistortionGap> {
    let q1 = lift_quadruple(&cover.z[0], &cover.z[1], &cover.z[2], &cover.z[3])?;
    let q2 = lift_quadruple(&cover.w[0], &cover.w[1], &cover.w[2], &cover.w[3])?;
    let d1 = distortion(&q1, map1, cover.rn)?;
    let d2 = distortion(&q2, map2, cover.rn)?;
    if d2.dist.is_zero() {
        return Err(LabError::Precision(
            "distortion of the conjugate cover collapsed to zero".into(),
        ));
    }
    let gap = (&(&d1.dist / &d2.dist) - &Scalar::one(d1.dist.prec())).abs();
    Ok(DistortionGap {
        gap,
        bound: distortion_gap_bound(&cover.product1, &cover.product2),
        dist1: d1.dist,
        dist2: d2.dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugacy::build_conjugacy;
    use crate::map::{make_piecewise_mobius, BreakSpec, MobiusMap};
    use crate::rotation::{rotation_number, tune_parameter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GOLDEN: f64 = 0.6180339887498949;

    fn dbl(x: f64) -> Scalar {
        Scalar::from_f64(x, Precision::DOUBLE)
    }

    fn cp(x: f64) -> CirclePoint {
        CirclePoint::from_f64(x, Precision::DOUBLE)
    }

    fn golden_break_map_at(locations: &[(f64, f64)], prec: Precision) -> MobiusMap {
        let breaks = locations
            .iter()
            .map(|&(loc, jump)| BreakSpec {
                location: CirclePoint::from_f64(loc, prec),
                jump: Scalar::from_f64(jump, prec),
            })
            .collect();
        let golden = Scalar::from_f64(GOLDEN, prec);
        let base = make_piecewise_mobius(breaks, golden.clone()).unwrap();
        let t = tune_parameter(&base, &golden, &Scalar::from_f64(1e-8, prec), 4_000_000).unwrap();
        base.with_lift_shift(t)
    }

    fn golden_break_map(locations: &[(f64, f64)]) -> MobiusMap {
        golden_break_map_at(locations, Precision::DOUBLE)
    }

    #[test]
    fn rotation_has_no_preimages() {
        let rot = MobiusMap::rotation(dbl(GOLDEN));
        let pre = qn_preimages(&rot, 7, &cp(0.2)).unwrap();
        assert!(pre.is_empty());
    }

    #[test]
    fn one_break_preimage_round_trips() {
        let map = golden_break_map(&[(0.5, 2.0)]);
        let x0 = cp(0.13);
        let pre = qn_preimages(&map, 9, &x0).unwrap();
        assert_eq!(pre.len(), 1);
        let p = &pre[0];
        let back = map.iterate(&p.point, p.return_time).unwrap();
        let err = circular_distance(&back, &p.source_break.location);
        assert!(err.to_f64() < 1e-9, "round trip error {}", err);
        let frame = window_frame(&map, 9, &x0).unwrap();
        let bound = match p.side {
            WindowSide::Left => frame.qn_prev,
            WindowSide::Right => frame.qn,
        };
        assert!(p.return_time > 0 && p.return_time < bound);
    }

    #[test]
    fn preimage_sides_match_sub_arcs() {
        let map = golden_break_map(&[(0.34, 2.0), (0.78, 0.4)]);
        let x0 = cp(0.055);
        let frame = window_frame(&map, 9, &x0).unwrap();
        let left = Arc::new(frame.start.clone(), frame.base.clone()).unwrap();
        let right = Arc::new(frame.base.clone(), frame.end.clone()).unwrap();
        let pre = qn_preimages(&map, 9, &x0).unwrap();
        assert_eq!(pre.len(), 2);
        for p in &pre {
            match p.side {
                WindowSide::Left => assert!(left.contains_half_open(&p.point)),
                WindowSide::Right => assert!(right.contains_half_open(&p.point)),
            }
        }
    }

    #[test]
    fn window_containing_break_is_rejected() {
        let map = golden_break_map(&[(0.5, 2.0)]);
        let err = qn_preimages(&map, 9, &cp(0.5)).unwrap_err();
        assert!(matches!(err, LabError::InvalidConfig(_)), "{err}");
    }

    fn rotation_pair_table(n: usize) -> (MobiusMap, MobiusMap, ConjugacyApprox) {
        let f = MobiusMap::rotation(dbl(GOLDEN));
        let g = MobiusMap::rotation(dbl(GOLDEN));
        let x0 = cp(0.2);
        let approx = build_conjugacy(&f, &g, &x0, &x0, n).unwrap();
        (f, g, approx)
    }

    #[test]
    fn rotation_pair_break_set_is_anchors_only() {
        let (f, g, approx) = rotation_pair_table(512);
        let oracle = ConjugacyOracle::from_table(&approx);
        let bset = build_break_set(&f, &g, &oracle, 7, &cp(0.2)).unwrap();
        assert_eq!(bset.len(), 3);
        assert!(bset.elements().iter().all(|e| e.is_anchor()));
        let (p1, p2) = bset.total_products();
        assert_eq!(p1.to_f64(), 1.0);
        assert_eq!(p2.to_f64(), 1.0);
    }

    #[test]
    fn one_break_vs_rotation_break_set_has_four_points() {
        let f = golden_break_map(&[(0.5, 2.0)]);
        let rho = rotation_number(&f, 1 << 16).unwrap();
        let g = MobiusMap::rotation(rho.value.clone());
        let x0 = cp(0.13);
        let approx = build_conjugacy(&f, &g, &x0, &x0, 2048).unwrap();
        let oracle = ConjugacyOracle::from_table(&approx);
        let bset = build_break_set(&f, &g, &oracle, 9, &x0).unwrap();
        assert_eq!(bset.len(), 4);
        assert_eq!(bset.break_counts(), (1, 0));
    }

    #[test]
    fn mixed_pair_break_set_stays_in_window() {
        let f = golden_break_map(&[(0.34, 2.0), (0.78, 0.4)]);
        let g = golden_break_map(&[(0.6, 3.0)]);
        let x0 = cp(0.055);
        let t0 = cp(0.055);
        let approx = build_conjugacy(&f, &g, &x0, &t0, 4096).unwrap();
        let oracle = ConjugacyOracle::from_table(&approx);
        let bset = build_break_set(&f, &g, &oracle, 7, &x0).unwrap();
        assert!(bset.len() <= 6);
        assert_eq!(bset.break_counts(), (2, 1));
        let window = bset.frame().window_arc().unwrap();
        for e in bset.elements() {
            assert!(window.contains_closed(&e.point), "element {} outside", e.point);
        }
    }

    /// A synthetic set over a window of length 1/2; entry positions are
    /// given as fractions of the window.
    fn synthetic_set(entries: &[(f64, ElementTag)]) -> BreakSet {
        let d = dbl(0.5);
        let frame = WindowFrame::synthetic(d.clone(), &d * &dbl(0.4), 21, 13).unwrap();
        BreakSet::synthetic(
            frame,
            entries
                .iter()
                .map(|(o, t)| (&d * &dbl(*o), t.clone()))
                .collect(),
        )
        .unwrap()
    }

    fn map_one_tag(jump: f64, return_time: i64) -> ElementTag {
        ElementTag::MapOne {
            break_index: 0,
            jump: dbl(jump),
            return_time,
        }
    }

    fn map_two_tag(jump: f64, return_time: i64) -> ElementTag {
        ElementTag::MapTwo {
            break_index: 0,
            jump: dbl(jump),
            return_time,
        }
    }

    #[test]
    fn anchors_only_grid_level_zero() {
        let bset = synthetic_set(&[]);
        let (grid, clusters) = grid_clusters(&bset, 7, 0).unwrap();
        let flags = grid.dense_occupancy(64).unwrap();
        assert_eq!(flags.len(), 7);
        assert!(flags[0] && flags[6], "extreme cells must be occupied");
        assert!(flags.iter().any(|f| !f), "an empty cell must exist");
        assert!(clusters.count() >= 2);
    }

    #[test]
    fn nested_grids_and_cluster_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x636f_7665);
        for _ in 0..150 {
            let count = rng.gen_range(0..=6);
            let entries: Vec<(f64, ElementTag)> = (0..count)
                .map(|_| (rng.gen_range(0.01..0.99), map_one_tag(2.0, 1)))
                .collect();
            let bset = synthetic_set(&entries);
            let mut prev_count = None;
            for level in 0..5u32 {
                let (grid, clusters) = grid_clusters(&bset, 10, level).unwrap();
                if let Some(pc) = prev_count {
                    assert!(clusters.count() >= pc, "cluster count dropped");
                }
                prev_count = Some(clusters.count());
                // Every occupied cell keeps at least one empty child cell.
                let (fine, _) = grid_clusters(&bset, 10, level + 1).unwrap();
                let mut parents: Vec<Integer> = grid.element_cells().to_vec();
                parents.dedup();
                for parent in parents {
                    let children = fine
                        .element_cells()
                        .iter()
                        .filter(|c| {
                            Integer::from(*c / 10u32) == parent
                        })
                        .map(|c| c.clone())
                        .collect::<std::collections::HashSet<_>>();
                    assert!(
                        children.len() < 10,
                        "occupied cell filled all its children"
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_tie_lands_in_right_cell() {
        // With a dyadic window length and m0 = 8 the cell boundaries are
        // exact machine numbers: an offset of 2/8 of the window is the
        // boundary between cells 1 and 2, and the tie goes right.
        let frame = WindowFrame::synthetic(dbl(0.5), dbl(0.2), 21, 13).unwrap();
        let bset = BreakSet::synthetic(frame, vec![(dbl(0.125), map_one_tag(2.0, 1))]).unwrap();
        let (grid, _) = grid_clusters(&bset, 8, 0).unwrap();
        let cells = grid.element_cells();
        // Elements are sorted: window start, the entry, base, window end.
        assert_eq!(cells[1], Integer::from(2));
        // The window end itself has no right cell and stays in the last.
        assert_eq!(cells[3], Integer::from(7));
    }

    #[test]
    fn single_preimage_search_selects_it() {
        let bset = synthetic_set(&[(0.7, map_one_tag(2.0, 5))]);
        let search = theorem31_search(&bset, 7, 9).unwrap();
        assert!(search.s0 <= 9 * 2);
        let sel = &search.clusters.clusters[search.selected];
        let has_preimage = sel.members.iter().any(|&e| {
            bset.elements()[e]
                .tags
                .iter()
                .any(|t| matches!(t, ElementTag::MapOne { .. }))
        });
        assert!(has_preimage);
        let (p1, p2) = &search.products[search.selected];
        assert_eq!(p1.to_f64(), 2.0);
        assert_eq!(p2.to_f64(), 1.0);
    }

    #[test]
    fn coinciding_totals_are_rejected() {
        let bset = synthetic_set(&[
            (0.2, map_one_tag(2.0, 3)),
            (0.7, map_two_tag(2.0, 4)),
        ]);
        let err = theorem31_search(&bset, 7, 9).unwrap_err();
        assert!(matches!(err, LabError::InvalidConfig(_)), "{err}");
    }

    /// Brute-force re-verification of the two distance claims from raw
    /// offsets, independent of the grid index bookkeeping.
    fn verify_claims_from_offsets(bset: &BreakSet, search: &TheoremSearch) {
        let m0 = Integer::from(search.grid.m0());
        let dn = bset.d_n().to_rational();
        let diam_bound = Rational::from(2) * &dn / m0.clone().pow(search.s0 + search.r);
        let gap_bound = dn / m0.pow(search.s0 + 1);
        for cluster in &search.clusters.clusters {
            for (i, &a) in cluster.members.iter().enumerate() {
                for &b in cluster.members.iter().skip(i + 1) {
                    let d = bset.elements()[b].offset.to_rational()
                        - bset.elements()[a].offset.to_rational();
                    assert!(d <= diam_bound, "cluster pair too far apart");
                }
            }
        }
        for pair in search.clusters.clusters.windows(2) {
            let left = &bset.elements()[*pair[0].members.last().unwrap()].offset;
            let right = &bset.elements()[*pair[1].members.first().unwrap()].offset;
            let d = right.to_rational() - left.to_rational();
            assert!(d > gap_bound, "adjacent clusters closer than one cell");
        }
    }

    #[test]
    fn randomized_search_meets_claims() {
        let prec = Precision::new(256).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x7468_3331);
        for trial in 0..300 {
            let d = Scalar::from_ratio(1, 2, prec);
            let frame = WindowFrame::synthetic(
                d.clone(),
                &d * &Scalar::from_f64(rng.gen_range(0.3..0.7), prec),
                21,
                13,
            )
            .unwrap();
            let m1 = rng.gen_range(1..=4usize);
            let m2 = rng.gen_range(0..=(6 - m1).min(3));
            let mut entries: Vec<(Scalar, ElementTag)> = Vec::new();
            let mut cursor = Scalar::from_f64(rng.gen_range(0.01..0.2), prec);
            for i in 0..(m1 + m2) {
                // Adversarial spacing: a fraction of trials step by tiny
                // powers of the grid base so points pack inside deep cells.
                let step = if rng.gen_bool(0.4) {
                    let e = rng.gen_range(5..18);
                    Scalar::from_f64(7.0, prec).powi(-e)
                } else {
                    Scalar::from_f64(rng.gen_range(0.02..0.2), prec)
                };
                cursor = &cursor + &step;
                if cursor >= Scalar::from_f64(0.99, prec) {
                    cursor = Scalar::from_f64(rng.gen_range(0.01..0.5), prec);
                }
                let jump = [2.0, 3.0, 0.5, 1.25][rng.gen_range(0..4)];
                let tag = if i < m1 {
                    ElementTag::MapOne {
                        break_index: i,
                        jump: Scalar::from_f64(jump, prec),
                        return_time: 1,
                    }
                } else {
                    ElementTag::MapTwo {
                        break_index: i - m1,
                        jump: Scalar::from_f64(jump, prec),
                        return_time: 1,
                    }
                };
                entries.push((&d * &cursor, tag));
            }
            let bset = match BreakSet::synthetic(frame, entries) {
                Ok(b) => b,
                Err(_) => continue,
            };
            let (t1, t2) = bset.total_products();
            if !products_differ(&t1, &t2) {
                continue;
            }
            let (m1c, m2c) = bset.break_counts();
            let m0 = (m1c + m2c + 4).max(7) as u32;
            let search = theorem31_search(&bset, m0, 9)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert!(search.s0 <= 9 * (m1c + m2c + 1) as u32);
            verify_claims_from_offsets(&bset, &search);
        }
    }

    fn one_break_cover_inputs_at(
        prec: Precision,
    ) -> (MobiusMap, MobiusMap, ConjugacyApprox, CirclePoint) {
        let f = golden_break_map_at(&[(0.5, 2.0)], prec);
        let rho = rotation_number(&f, 1 << 16).unwrap();
        let g = MobiusMap::rotation(rho.value.clone());
        let x0 = CirclePoint::from_f64(0.13, prec);
        let approx = build_conjugacy(&f, &g, &x0, &x0, 2048).unwrap();
        (f, g, approx, x0)
    }

    fn one_break_cover_inputs() -> (MobiusMap, MobiusMap, ConjugacyApprox, CirclePoint) {
        one_break_cover_inputs_at(Precision::DOUBLE)
    }

    #[test]
    fn one_break_vs_rotation_cover_is_case_one() {
        let (f, g, approx, x0) = one_break_cover_inputs();
        let oracle = ConjugacyOracle::from_table(&approx);
        let consts = CoverConstants::standard(Precision::DOUBLE);
        let cover = regular_cover(&f, &g, &oracle, 9, &x0, &consts).unwrap();
        assert_eq!(cover.case, CoverCase::C1);
        let frame = window_frame(&f, 9, &x0).unwrap();
        assert_eq!(cover.rn, frame.qn);
        // The middle interval is m0 times the first one by construction.
        let ratio = cover.side1.ratio_23_over_12;
        assert!(
            (ratio - cover.m0 as f64).abs() < 1e-6 * cover.m0 as f64,
            "ratio {ratio} vs m0 {}",
            cover.m0
        );
        assert!(cover.side1.required);
        assert!(
            cover.side1.holds.iter().all(|&h| h),
            "side 1 conditions {:?}",
            cover.side1
        );
        assert!(!cover.side2.required);
        assert_eq!(cover.side1.foreign_hits, 0);
        assert!(cover.side1.ratio_drift_ok);
        assert_eq!(cover.product1.to_f64(), 2.0);
        assert_eq!(cover.product2.to_f64(), 1.0);
    }

    #[test]
    fn cover_coverage_matches_forward_oracle() {
        // Independent single-coverage check: intersect the forward images
        // of [z1, z4] with the break directly, instead of pulling the
        // break backward.
        // Level 11 stabilizes at s0 = 9, which pushes the z-offsets to
        // m0^-16 d_n, below double granularity near the window; it needs
        // the wider mantissa.
        for (n, prec) in [(9usize, Precision::DOUBLE), (11, Precision::new(128).unwrap())] {
            let (f, g, approx, x0) = one_break_cover_inputs_at(prec);
            let oracle = ConjugacyOracle::from_table(&approx);
            let consts = CoverConstants::standard(prec);
            let cover = regular_cover(&f, &g, &oracle, n, &x0, &consts).unwrap();
            let b = &f.breaks()[0].location;
            let mut count = 0;
            let mut lo = cover.z[0].clone();
            let mut hi = cover.z[3].clone();
            for _ in 0..cover.rn {
                if Arc::new(lo.clone(), hi.clone()).unwrap().contains_closed(b) {
                    count += 1;
                }
                lo = f.apply(&lo);
                hi = f.apply(&hi);
            }
            assert_eq!(count, 1, "level {n}");
        }
    }

    #[test]
    fn engineered_base_point_triggers_case_two() {
        let f = golden_break_map(&[(0.5, 2.0)]);
        let rho = rotation_number(&f, 1 << 16).unwrap();
        let g = MobiusMap::rotation(rho.value.clone());
        // Stage one: find the break preimage for a provisional base, then
        // re-anchor the experiment a hair to its right. The preimage then
        // shares the base's grid cell through the stable level, so the
        // discriminating cluster contains the base anchor.
        let x0_probe = cp(0.13);
        let pre = qn_preimages(&f, 9, &x0_probe).unwrap();
        let frame = window_frame(&f, 9, &x0_probe).unwrap();
        let nudge = &frame.d_n * &dbl(0.3e-10);
        let x0 = pre[0].point.translate(&nudge);
        let approx = build_conjugacy(&f, &g, &x0, &x0, 2048).unwrap();
        let oracle = ConjugacyOracle::from_table(&approx);
        let consts = CoverConstants::standard(Precision::DOUBLE);
        let cover = regular_cover(&f, &g, &oracle, 9, &x0, &consts).unwrap();
        assert_eq!(cover.case, CoverCase::C2);
        let frame = window_frame(&f, 9, &x0).unwrap();
        assert_eq!(cover.rn, frame.qn + frame.qn_prev);
        assert!(cover.side1.holds.iter().all(|&h| h), "{:?}", cover.side1);
        assert_eq!(cover.product1.to_f64(), 2.0);
    }

    /// Fabricated break set over a real rotation window whose stable
    /// level pins the base to the window start: a tiny cluster at the
    /// start carries the only differing jump, a matched mid-window pair
    /// coincides, and two matched pairs hug the window end so the far
    /// cluster must be split by entry time and merged.
    fn case_three_fixture(
        e_a_time: i64,
        e_b_time: i64,
    ) -> (MobiusMap, WindowFrame, BreakSet) {
        let rot = MobiusMap::rotation(dbl(GOLDEN));
        let x0 = cp(0.2);
        let real = window_frame(&rot, 9, &x0).unwrap();
        let d_n = real.d_n.clone();
        let eps = &d_n * &dbl(1e-11);
        let frame = WindowFrame {
            start: real.start.clone(),
            base: real.start.translate(&eps),
            end: real.end.clone(),
            qn: real.qn,
            qn_prev: real.qn_prev,
            d_n: d_n.clone(),
        };
        let pair = |offset: Scalar, jump: f64, time: i64| {
            [
                (
                    offset.clone(),
                    ElementTag::MapOne {
                        break_index: 0,
                        jump: dbl(jump),
                        return_time: time,
                    },
                ),
                (
                    offset,
                    ElementTag::MapTwo {
                        break_index: 0,
                        jump: dbl(jump),
                        return_time: time,
                    },
                ),
            ]
        };
        let mut entries = vec![(
            &eps * &dbl(2.0),
            ElementTag::MapOne {
                break_index: 0,
                jump: dbl(2.0),
                return_time: 3,
            },
        )];
        entries.extend(pair(&d_n * &dbl(0.5), 3.0, 2));
        entries.extend(pair(&d_n - &eps, 3.0, e_a_time));
        entries.extend(pair(&d_n - &(&eps * &dbl(2.0)), 5.0, e_b_time));
        let bset = BreakSet::synthetic(frame.clone(), entries).unwrap();
        (rot, frame, bset)
    }

    #[test]
    fn case_three_plan_merges_far_cluster() {
        let (rot, frame, bset) = case_three_fixture(25, 22);
        let lo = frame.qn - frame.qn_prev; // 55 - 34 = 21
        assert!((lo..frame.qn_prev).contains(&25) && (lo..frame.qn_prev).contains(&22));
        let search = theorem31_search(&bset, 11, 9).unwrap();
        assert_eq!(search.s0, 0, "fixture is built to stabilize immediately");
        let plan = plan_cover(&bset, &search, &rot).unwrap();
        assert_eq!(plan.case, CoverCase::C3);
        assert_eq!(plan.rn, frame.qn);
        // Subset: the three start-cluster elements plus the two far
        // preimages; the window-end anchor and the mid pair stay out.
        assert_eq!(plan.subset_elements.len(), 5);
        // Both far elements return late, are pulled forward past the
        // window start, and land just left of it, so the pivot is the
        // tiny cluster's rightmost element at offset 2 eps.
        let z2_off = plan.z[1].signed_offset(&frame.start);
        let want = (&frame.d_n * &dbl(2e-11)).to_f64();
        assert!(
            (z2_off.to_f64() - want).abs() < 1e-14,
            "pivot offset {} expected {want}",
            z2_off
        );
        // The cover widths follow the doubled case-three offsets.
        let l12 = plan.z[0].ccw_dist(&plan.z[1]).to_f64();
        let l23 = plan.z[1].ccw_dist(&plan.z[2]).to_f64();
        let d = frame.d_n.to_f64();
        assert!((l12 - 2.0 * d * 11f64.powi(-6)).abs() < 1e-12 * d);
        assert!((l23 - 2.0 * d * 11f64.powi(-4)).abs() < 1e-12 * d);
    }

    #[test]
    fn case_three_plan_routes_early_returns_backward() {
        // The second far pair now returns early, so it is pulled back by
        // q_{n-1} instead of forward; for a rotation that is an exact
        // translation by -q_{n-1} alpha, landing near the true base x0.
        let (rot, frame, bset) = case_three_fixture(25, 5);
        let search = theorem31_search(&bset, 11, 9).unwrap();
        let plan = plan_cover(&bset, &search, &rot).unwrap();
        assert_eq!(plan.case, CoverCase::C3);
        let eps = &frame.d_n * &dbl(2e-11);
        let e_b = frame.end.translate(&-&eps);
        let expected = rot.iterate(&e_b, -frame.qn_prev).unwrap();
        // The pivot is the pulled early-return point: x0 - 2 eps, far to
        // the right of the synthetic base in signed coordinates.
        let err = circular_distance(&plan.z[1], &expected).to_f64();
        assert!(err < 1e-13, "pivot missed the pulled point by {err}");
    }

    #[test]
    fn distortion_gap_bound_arithmetic() {
        let b = distortion_gap_bound(&dbl(2.0), &dbl(1.0));
        assert!((b.to_f64() - 0.4).abs() < 1e-12, "{}", b);
        let z = distortion_gap_bound(&dbl(2.0), &dbl(2.0));
        assert!(z.is_zero());
        // Swapped products: L = min(1, 2, 1) = 1, first display gives
        // |4(-1) - 2| / (4*2 + 1) = 6/9, second |4(-1)+2|/(4*2-1) = 2/7.
        let s = distortion_gap_bound(&dbl(1.0), &dbl(2.0));
        assert!((s.to_f64() - 2.0 / 7.0).abs() < 1e-12, "{}", s);
    }

    #[test]
    fn one_break_gap_meets_bound() {
        let (f, g, approx, x0) = one_break_cover_inputs();
        let oracle = ConjugacyOracle::from_table(&approx);
        let consts = CoverConstants::standard(Precision::DOUBLE);
        let cover = regular_cover(&f, &g, &oracle, 9, &x0, &consts).unwrap();
        let gap = distortion_gap_experiment(&f, &g, &cover).unwrap();
        assert!((gap.bound.to_f64() - 0.4).abs() < 1e-12);
        assert!(
            gap.gap.to_f64() >= gap.bound.to_f64() - 0.05,
            "gap {} below bound {}",
            gap.gap,
            gap.bound
        );
        // The rotation side never distorts cross-ratios.
        assert!((gap.dist2.to_f64() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coinciding_control_gap_is_small() {
        let f = golden_break_map(&[(0.5, 2.0)]);
        let psi = SineDiffeo::new(dbl(0.35), dbl(0.0)).unwrap();
        let g = crate::map::ConjugatedMap::new(psi.clone(), f.clone());
        let x0 = cp(0.13);
        let t0 = psi.apply(&x0);
        let approx = build_conjugacy(&f, &g, &x0, &t0, 2048).unwrap();
        let oracle = ConjugacyOracle::with_exact(&approx, &psi);
        let consts = CoverConstants::standard(Precision::DOUBLE);
        let cover = regular_cover(&f, &g, &oracle, 9, &x0, &consts).unwrap();
        assert!(cover.h_exact);
        assert!(cover.bound_is_degenerate());
        let gap = distortion_gap_experiment(&f, &g, &cover).unwrap();
        assert!(gap.bound.is_zero());
        assert!(
            gap.gap.to_f64() < 0.1,
            "coinciding pair should not separate, gap {}",
            gap.gap
        );
    }

    #[test]
    fn cover_report_serializes() {
        let (f, g, approx, x0) = one_break_cover_inputs();
        let oracle = ConjugacyOracle::from_table(&approx);
        let consts = CoverConstants::standard(Precision::DOUBLE);
        let cover = regular_cover(&f, &g, &oracle, 9, &x0, &consts).unwrap();
        let json = cover.to_json();
        assert_eq!(json["case"], "C1");
        assert_eq!(json["all_conditions_hold"], true);
        assert_eq!(json["z"].as_array().unwrap().len(), 4);
    }
}
