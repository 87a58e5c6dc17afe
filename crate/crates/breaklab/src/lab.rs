//! Experiment orchestration: configuration parsing, preset experiments,
//! cached runs, and CSV/JSON report emission.
//!
//! An [`ExperimentConfig`] names two maps, a rotation target, budgets, and
//! diagnostic parameters. [`run_experiment`] resolves the pair (tuning lift
//! shifts, building the rotation partner or the closed-form conjugate),
//! runs the requested diagnostic stages in a fixed order, evaluates the
//! configured pass/fail criteria, and writes `report.json` into the output
//! directory. [`emit_plot_data`] turns the run artifacts into CSV files.
//!
//! Runs are deterministic: every sampling stream is a fixed-seed generator,
//! reports carry no timestamps, and reruns reuse cached orbit tables keyed
//! by a content hash of the config, so cached and fresh runs produce
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::circle::CirclePoint;
use crate::conjugacy::{
    assemble_table, build_conjugacy, singularity_report, smooth_oracle_compare, ConjugacyApprox,
    SingularityReport,
};
use crate::covering::{
    distortion_gap_experiment, regular_cover, ConjugacyOracle, CoverConstants, CoverReport,
    DistortionGap, COVER_SEARCH_STEP,
};
use crate::crossratio::{distortion_residuals, lemma52_bounds, RegressionReport, ResidualMode};
use crate::error::{LabError, Result};
use crate::map::{
    make_piecewise_mobius, BreakSpec, CircleMap, ConjugatedMap, MapSpec, MobiusMap, SineDiffeo,
    DEFAULT_ORBIT_BUDGET,
};
use crate::partition::{denjoy_report, dynamical_partition, length_decay_fit, LengthDecayFit};
use crate::rotation::{closest_return_quotients, rotation_number, tune_parameter, RotationEstimate};
use crate::scalar::{Precision, Scalar};

/// Sample count of the emitted conjugacy graph CSV.
pub const CONJUGACY_GRAPH_SAMPLES: usize = 1 << 12;

/// Environment variable overriding the cache directory.
pub const CACHE_ENV_VAR: &str = "BREAKLAB_CACHE";

/// Corruption factor of the Denjoy negative control: the sampled bounds are
/// re-checked against w = 0.45 v, which sits below the realized suprema of
/// the ratio samples, so a healthy sampler reports violations against it.
pub const NEGATIVE_CONTROL_FACTOR: f64 = 0.45;

/// Stage names in execution order.
pub const STAGE_ORDER: [&str; 8] = [
    "rho",
    "partition",
    "denjoy",
    "decay",
    "distortion",
    "conjugacy",
    "singularity",
    "cover",
];

fn default_tune_tolerance() -> f64 {
    1e-8
}

fn default_orbit_budget() -> u64 {
    1 << 20
}

fn default_precision_bits() -> u32 {
    53
}

fn default_table_size() -> usize {
    4096
}

fn default_k_range() -> Vec<u32> {
    vec![6, 8, 10, 12]
}

fn default_delta() -> f64 {
    0.1
}

fn default_levels() -> Vec<usize> {
    vec![6, 9]
}

fn default_denjoy_samples() -> usize {
    200
}

fn default_decay_n_max() -> usize {
    12
}

fn default_residual_trials() -> usize {
    24
}

fn default_cover_search_step() -> u32 {
    COVER_SEARCH_STEP
}

fn default_m_big() -> f64 {
    3.0
}

fn default_zeta() -> f64 {
    0.5
}

fn default_delta_cover() -> f64 {
    0.1
}

fn default_diagnostics() -> Vec<String> {
    vec![
        "rho".into(),
        "partition".into(),
        "denjoy".into(),
        "decay".into(),
        "distortion".into(),
        "conjugacy".into(),
        "singularity".into(),
    ]
}

/// Trend thresholds between two dyadic levels of the singularity report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrendSpec {
    pub k_lo: u32,
    pub k_hi: u32,
    /// mass(k_hi) must be below this multiple of mass(k_lo).
    pub max_mass_ratio: f64,
    /// Median log10 slope must drop by at least this many decades.
    pub min_median_drop: f64,
}

/// Pass/fail thresholds evaluated after a run, for CI gating. Every field
/// is optional; a present threshold whose backing stage did not complete
/// counts as failed.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CriteriaSpec {
    /// Both rotation estimates certified at least this tightly.
    pub max_rho_error: Option<f64>,
    /// Denjoy violations at every requested level stay at or below this.
    pub max_denjoy_violations: Option<usize>,
    /// The corrupted bound registers at least this many violations at some
    /// level.
    pub min_negative_control_violations: Option<usize>,
    /// Fitted length-decay rate of each map exceeds its lambda bound by at
    /// most this much.
    pub max_decay_rate_excess: Option<f64>,
    /// Smooth-mode residual regression is exact or has at least this slope.
    pub min_smooth_slope: Option<f64>,
    /// Break-mode residual regression has at least this slope.
    pub min_break_slope: Option<f64>,
    /// Largest table defect against the closed-form conjugator.
    pub max_oracle_defect: Option<f64>,
    /// Equivariance residual within this multiple of the largest table gap.
    pub max_equivariance_gap_factor: Option<f64>,
    /// Mass-capture decay between two dyadic levels.
    pub singularity_trend: Option<TrendSpec>,
    /// Mass capture stays at or above this at every requested level.
    pub min_mass_floor: Option<f64>,
    /// Every cover gap is at least the model bound plus this offset. The
    /// offset is normally negative, a tolerance below the bound.
    pub min_gap_over_bound: Option<f64>,
    /// Every cover gap stays below this (coinciding-jump controls).
    pub max_gap: Option<f64>,
}

impl CriteriaSpec {
    fn is_empty(&self) -> bool {
        self == &CriteriaSpec::default()
    }
}

/// One experiment: a pair of maps plus every knob the stages read.
///
/// `precision_bits` governs all arithmetic of the run, including both maps;
/// the per-map `precision_bits` of a standalone [`MapSpec`] file is ignored
/// here so a preset cannot mix precisions. Unset fields take the documented
/// defaults, so preset files stay short.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub map1: MapSpec,
    pub map2: MapSpec,
    /// When set, lift shifts are retuned so rho(map1) hits this target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_target: Option<f64>,
    #[serde(default = "default_tune_tolerance")]
    pub tune_tolerance: f64,
    /// Cap on map applications per orbit-driven stage.
    #[serde(default = "default_orbit_budget")]
    pub orbit_budget: u64,
    #[serde(default = "default_precision_bits")]
    pub precision_bits: u32,
    /// Recorded in the cache key; all sampling streams are fixed-seed, so
    /// two runs differing only in the seed produce identical samples.
    #[serde(default)]
    pub seed: u64,
    pub base_point: f64,
    /// Second-circle base point t0 = h(x0). Defaults to psi(x0) for a
    /// closed-form conjugate pair and to x0 otherwise. Setting it on a
    /// psi pair demotes the oracle to the table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_point_2: Option<f64>,
    /// Conjugacy table size N.
    #[serde(default = "default_table_size")]
    pub table_size: usize,
    /// Dyadic levels of the singularity report.
    #[serde(default = "default_k_range")]
    pub k_range: Vec<u32>,
    /// Mass-capture delta.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Partition and Denjoy levels n.
    #[serde(default = "default_levels")]
    pub levels: Vec<usize>,
    #[serde(default = "default_denjoy_samples")]
    pub denjoy_samples: usize,
    #[serde(default = "default_decay_n_max")]
    pub decay_n_max: usize,
    #[serde(default = "default_residual_trials")]
    pub residual_trials: usize,
    /// Renormalization levels of the cover stage.
    #[serde(default)]
    pub cover_levels: Vec<usize>,
    /// Step r of the stable-level scan.
    #[serde(default = "default_cover_search_step")]
    pub cover_search_step: u32,
    /// Constant M of the cover conditions.
    #[serde(default = "default_m_big")]
    pub m_big: f64,
    /// Constant zeta of the cover conditions.
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    /// Constant delta of the cover conditions.
    #[serde(default = "default_delta_cover")]
    pub delta_cover: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0_override: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_override: Option<f64>,
    /// Stage names to run, any order; execution follows [`STAGE_ORDER`].
    #[serde(default = "default_diagnostics")]
    pub diagnostics: Vec<String>,
    #[serde(default)]
    pub criteria: CriteriaSpec,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(&fs::read_to_string(path)?)
    }

    /// Canonical single-line encoding hashed into the cache key, so config
    /// file formatting does not invalidate the cache.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    fn wants(&self, stage: &str) -> bool {
        self.diagnostics.iter().any(|d| d == stage)
    }

    pub fn validate(&self) -> Result<()> {
        Precision::new(self.precision_bits)?;
        if self.name.is_empty() {
            return Err(LabError::InvalidConfig("experiment name is empty".into()));
        }
        if self.orbit_budget < 4096 || self.orbit_budget > DEFAULT_ORBIT_BUDGET {
            return Err(LabError::InvalidConfig(format!(
                "orbit budget {} outside [4096, {DEFAULT_ORBIT_BUDGET}]",
                self.orbit_budget
            )));
        }
        if !(self.tune_tolerance.is_finite() && self.tune_tolerance > 0.0) {
            return Err(LabError::InvalidConfig(format!(
                "tune tolerance must be positive, got {}",
                self.tune_tolerance
            )));
        }
        if self.table_size < 2 || self.table_size as u64 > self.orbit_budget {
            return Err(LabError::InvalidConfig(format!(
                "table size {} outside [2, orbit budget {}]",
                self.table_size, self.orbit_budget
            )));
        }
        for frac in [("delta", self.delta), ("zeta", self.zeta), ("delta_cover", self.delta_cover)]
        {
            if !(frac.1 > 0.0 && frac.1 < 1.0) {
                return Err(LabError::InvalidConfig(format!(
                    "{} must lie in (0, 1), got {}",
                    frac.0, frac.1
                )));
            }
        }
        if self.m_big < 1.0 {
            return Err(LabError::InvalidConfig(format!(
                "M must be at least 1, got {}",
                self.m_big
            )));
        }
        for d in &self.diagnostics {
            if !STAGE_ORDER.contains(&d.as_str()) {
                return Err(LabError::InvalidConfig(format!(
                    "unknown diagnostic {d:?}; expected one of {STAGE_ORDER:?}"
                )));
            }
        }
        if self.wants("partition") || self.wants("denjoy") {
            if self.levels.is_empty() {
                return Err(LabError::InvalidConfig(
                    "partition and denjoy stages need at least one level".into(),
                ));
            }
            if let Some(&n) = self.levels.iter().find(|&&n| n < 2 || n > 30) {
                return Err(LabError::InvalidConfig(format!(
                    "partition level {n} outside [2, 30]"
                )));
            }
        }
        if self.wants("decay") && !(2..=30).contains(&self.decay_n_max) {
            return Err(LabError::InvalidConfig(format!(
                "decay level cap {} outside [2, 30]",
                self.decay_n_max
            )));
        }
        if self.wants("distortion") && self.residual_trials == 0 {
            return Err(LabError::InvalidConfig(
                "residual regression needs at least one trial".into(),
            ));
        }
        if self.wants("singularity") {
            if !self.wants("conjugacy") {
                return Err(LabError::InvalidConfig(
                    "the singularity stage reads the conjugacy table; add \"conjugacy\"".into(),
                ));
            }
            if self.k_range.is_empty() || self.k_range.iter().any(|&k| k == 0 || k > 30) {
                return Err(LabError::InvalidConfig(format!(
                    "dyadic levels {:?} must be nonempty within [1, 30]",
                    self.k_range
                )));
            }
        }
        if self.wants("cover") {
            if !self.wants("conjugacy") {
                return Err(LabError::InvalidConfig(
                    "the cover stage reads the conjugacy table; add \"conjugacy\"".into(),
                ));
            }
            if self.cover_levels.is_empty()
                || self.cover_levels.iter().any(|&n| n < 2 || n > 30)
            {
                return Err(LabError::InvalidConfig(format!(
                    "cover levels {:?} must be nonempty within [2, 30]",
                    self.cover_levels
                )));
            }
            if self.cover_search_step == 0 {
                return Err(LabError::InvalidConfig(
                    "stable-level search step must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Content hash identifying a config in the cache.
pub fn cache_key(config: &ExperimentConfig) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(config.canonical_json()?.as_bytes());
    let digest = hasher.finalize();
    let mut key = String::with_capacity(64);
    for byte in digest {
        key.push_str(&format!("{byte:02x}"));
    }
    Ok(key)
}

#[derive(Serialize, Deserialize)]
struct CachedRho {
    value: String,
    error_bound: String,
    iterations_used: u64,
    rational: bool,
}

impl CachedRho {
    fn from_estimate(est: &RotationEstimate) -> CachedRho {
        CachedRho {
            value: est.value.to_decimal_string(),
            error_bound: est.error_bound.to_decimal_string(),
            iterations_used: est.iterations_used,
            rational: est.rational,
        }
    }

    fn to_estimate(&self, prec: Precision) -> Result<RotationEstimate> {
        Ok(RotationEstimate {
            value: Scalar::parse(&self.value, prec)?,
            error_bound: Scalar::parse(&self.error_bound, prec)?,
            iterations_used: self.iterations_used,
            rational: self.rational,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheData {
    schema: u32,
    lift_shift1: String,
    lift_shift2: String,
    rho1: Option<CachedRho>,
    rho2: Option<CachedRho>,
    table_xs: Vec<String>,
    table_ts: Vec<String>,
}

/// Cached intermediates of one config: tuned lift shifts, rotation
/// estimates, and the conjugacy orbit table, all stored as injective
/// decimal strings that round-trip bit-exactly at the config precision.
pub struct RunCache {
    path: PathBuf,
    data: Option<CacheData>,
    /// Fresh values staged for persistence.
    pending: CacheData,
}

fn cache_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(CACHE_ENV_VAR) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => Path::new(&config.output_dir).join("cache"),
    }
}

impl RunCache {
    /// Open the cache slot of `config`. A missing, unreadable, or
    /// schema-mismatched file is a miss, never an error.
    pub fn open(config: &ExperimentConfig) -> Result<RunCache> {
        let path = cache_dir(config).join(format!("{}.json", cache_key(config)?));
        let data = fs::read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str::<CacheData>(&text).ok())
            .filter(|d| d.schema == 1);
        Ok(RunCache {
            path,
            data,
            pending: CacheData {
                schema: 1,
                lift_shift1: String::new(),
                lift_shift2: String::new(),
                rho1: None,
                rho2: None,
                table_xs: Vec::new(),
                table_ts: Vec::new(),
            },
        })
    }

    pub fn hit(&self) -> bool {
        self.data.is_some()
    }

    fn cached_shifts(&self, prec: Precision) -> Option<(Scalar, Scalar)> {
        let d = self.data.as_ref()?;
        let s1 = Scalar::parse(&d.lift_shift1, prec).ok()?;
        let s2 = Scalar::parse(&d.lift_shift2, prec).ok()?;
        Some((s1, s2))
    }

    fn cached_rho(&self, prec: Precision) -> Option<(RotationEstimate, RotationEstimate)> {
        let d = self.data.as_ref()?;
        let r1 = d.rho1.as_ref()?.to_estimate(prec).ok()?;
        let r2 = d.rho2.as_ref()?.to_estimate(prec).ok()?;
        Some((r1, r2))
    }

    fn cached_table(&self, prec: Precision) -> Option<(Vec<CirclePoint>, Vec<CirclePoint>)> {
        let d = self.data.as_ref()?;
        if d.table_xs.is_empty() || d.table_xs.len() != d.table_ts.len() {
            return None;
        }
        let parse = |col: &[String]| -> Option<Vec<CirclePoint>> {
            col.iter()
                .map(|s| Scalar::parse(s, prec).ok().map(CirclePoint::new))
                .collect()
        };
        Some((parse(&d.table_xs)?, parse(&d.table_ts)?))
    }

    /// Write the staged values unless this run was already served from the
    /// cache. Failure to persist is reported but does not fail the run.
    pub fn persist(&self) -> Result<()> {
        if self.hit() || self.pending.lift_shift1.is_empty() {
            return Ok(());
        }
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&self.path, serde_json::to_string(&self.pending)?)?;
        Ok(())
    }
}

/// Maps, base points, and pair classification resolved from a config.
pub struct PreparedPair {
    pub map1: Box<dyn CircleMap>,
    pub map2: Box<dyn CircleMap>,
    pub x0: CirclePoint,
    pub t0: CirclePoint,
    /// Closed-form conjugator when the pair is exactly psi-conjugate and
    /// the second base point is derived from it.
    pub psi: Option<SineDiffeo>,
    pub lift_shift1: Scalar,
    pub lift_shift2: Scalar,
    /// How map2 was resolved: "exact-psi", "partner-rotation", or
    /// "as-specified".
    pub pairing: &'static str,
}

fn mobius_part(spec: &MapSpec, prec: Precision, shift: &Scalar) -> Result<MobiusMap> {
    let breaks = spec
        .breaks
        .iter()
        .map(|b| BreakSpec {
            location: CirclePoint::from_f64(b.location, prec),
            jump: Scalar::from_f64(b.jump, prec),
        })
        .collect();
    make_piecewise_mobius(breaks, shift.clone())
}

fn wrap_family(spec: &MapSpec, prec: Precision, mobius: MobiusMap) -> Result<Box<dyn CircleMap>> {
    match spec.family.as_str() {
        "mobius" => Ok(Box::new(mobius)),
        "psi_mobius" => {
            let a = spec.psi_amplitude.ok_or_else(|| {
                LabError::InvalidSpec("family \"psi_mobius\" requires psi_amplitude".into())
            })?;
            let phase = spec.psi_phase.unwrap_or(0.0);
            let psi = SineDiffeo::new(Scalar::from_f64(a, prec), Scalar::from_f64(phase, prec))?;
            Ok(Box::new(ConjugatedMap::new(psi, mobius)))
        }
        other => Err(LabError::InvalidSpec(format!("unknown map family {other:?}"))),
    }
}

/// Whether map2 is map1 conjugated by a known sine diffeomorphism, which
/// makes the conjugacy available in closed form.
fn is_exact_psi_pair(config: &ExperimentConfig) -> bool {
    config.map1.family == "mobius"
        && config.map2.family == "psi_mobius"
        && config.map1.breaks == config.map2.breaks
        && config.map1.lift_shift == config.map2.lift_shift
}

/// Whether map2 stands for the rigid rotation partner whose angle tracks
/// the measured rotation number of map1.
fn is_partner_rotation(config: &ExperimentConfig) -> bool {
    config.map2.family == "mobius"
        && config.map2.breaks.is_empty()
        && !config.map1.breaks.is_empty()
        && config.rotation_target.is_some()
}

/// Budget of the partner-rotation estimate: the table order isomorphism
/// needs the angle within roughly 0.1 / N^2, which the closest-return
/// bracket reaches well before these iteration counts.
fn partner_budget(config: &ExperimentConfig) -> u64 {
    (8 * config.table_size as u64)
        .max(1 << 21)
        .min(config.orbit_budget)
}

/// Resolve both maps of a config, tuning lift shifts where requested.
pub fn prepare_pair(config: &ExperimentConfig, cache: &RunCache) -> Result<PreparedPair> {
    let prec = Precision::new(config.precision_bits)?;
    let cached = cache.cached_shifts(prec);

    let shift1 = match (&cached, config.rotation_target) {
        (Some((s1, _)), _) => s1.clone(),
        (None, Some(target)) => {
            let base = mobius_part(&config.map1, prec, &Scalar::from_f64(config.map1.lift_shift, prec))?;
            tune_parameter(
                &base,
                &Scalar::from_f64(target, prec),
                &Scalar::from_f64(config.tune_tolerance, prec),
                config.orbit_budget,
            )?
        }
        (None, None) => Scalar::from_f64(config.map1.lift_shift, prec),
    };
    let mobius1 = mobius_part(&config.map1, prec, &shift1)?;
    let map1 = wrap_family(&config.map1, prec, mobius1)?;

    let exact_pair = is_exact_psi_pair(config);
    let (shift2, pairing) = if let Some((_, s2)) = cached {
        let pairing = if exact_pair {
            "exact-psi"
        } else if is_partner_rotation(config) {
            "partner-rotation"
        } else {
            "as-specified"
        };
        (s2, pairing)
    } else if exact_pair {
        (shift1.clone(), "exact-psi")
    } else if is_partner_rotation(config) {
        let rho = rotation_number(map1.as_ref(), partner_budget(config))?;
        (rho.value, "partner-rotation")
    } else if config.rotation_target.is_some() && !config.map2.breaks.is_empty() {
        let base = mobius_part(&config.map2, prec, &Scalar::from_f64(config.map2.lift_shift, prec))?;
        let tuned = tune_parameter(
            &base,
            &Scalar::from_f64(config.rotation_target.unwrap(), prec),
            &Scalar::from_f64(config.tune_tolerance, prec),
            config.orbit_budget,
        )?;
        (tuned, "as-specified")
    } else {
        (Scalar::from_f64(config.map2.lift_shift, prec), "as-specified")
    };
    let mobius2 = mobius_part(&config.map2, prec, &shift2)?;
    let map2 = wrap_family(&config.map2, prec, mobius2)?;

    let x0 = CirclePoint::from_f64(config.base_point, prec);
    let psi = if exact_pair && config.base_point_2.is_none() {
        Some(SineDiffeo::new(
            Scalar::from_f64(config.map2.psi_amplitude.unwrap_or(0.0), prec),
            Scalar::from_f64(config.map2.psi_phase.unwrap_or(0.0), prec),
        )?)
    } else {
        None
    };
    let t0 = match (config.base_point_2, &psi) {
        (Some(t), _) => CirclePoint::from_f64(t, prec),
        (None, Some(p)) => p.apply(&x0),
        (None, None) => x0.clone(),
    };

    Ok(PreparedPair {
        map1,
        map2,
        x0,
        t0,
        psi,
        lift_shift1: shift1,
        lift_shift2: shift2,
        pairing,
    })
}

/// Build or restore the conjugacy table of a prepared pair.
pub fn conjugacy_table(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    cache: &RunCache,
) -> Result<ConjugacyApprox> {
    let prec = Precision::new(config.precision_bits)?;
    if let Some((xs, ts)) = cache.cached_table(prec) {
        if xs.len() == config.table_size {
            return assemble_table(
                pair.map1.as_ref(),
                pair.map2.as_ref(),
                &pair.x0,
                &pair.t0,
                xs,
                ts,
            );
        }
    }
    build_conjugacy(
        pair.map1.as_ref(),
        pair.map2.as_ref(),
        &pair.x0,
        &pair.t0,
        config.table_size,
    )
}

/// Prepare the pair and conjugacy table of a config in one step,
/// consulting the cache and refreshing it with anything recomputed. This
/// is the entry point for table-reading commands that bypass the full
/// stage sequence of [`run_experiment`].
pub fn prepared_table(config: &ExperimentConfig) -> Result<(PreparedPair, ConjugacyApprox)> {
    config.validate()?;
    let mut cache = RunCache::open(config)?;
    let pair = prepare_pair(config, &cache)?;
    cache.pending.lift_shift1 = pair.lift_shift1.to_decimal_string();
    cache.pending.lift_shift2 = pair.lift_shift2.to_decimal_string();
    let approx = conjugacy_table(config, &pair, &cache)?;
    cache.pending.table_xs = (0..approx.count())
        .map(|i| approx.pair(i).0.position().to_decimal_string())
        .collect();
    cache.pending.table_ts = (0..approx.count())
        .map(|i| approx.pair(i).1.position().to_decimal_string())
        .collect();
    if let Err(e) = cache.persist() {
        eprintln!("warning: could not persist the run cache: {e}");
    }
    Ok((pair, approx))
}

/// Outcome of one stage. `data` keeps whatever the stage completed before
/// an error, so partial results survive in the report.
#[derive(Serialize)]
pub struct StageOutcome {
    pub name: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    pub data: serde_json::Value,
}

#[derive(Serialize)]
pub struct CriterionOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// In-memory artifacts backing the plot emitters; not serialized.
#[derive(Default)]
pub struct RunArtifacts {
    pub approx: Option<ConjugacyApprox>,
    pub singularity: Option<SingularityReport>,
    /// (map index, fit) for each map measured by the decay stage.
    pub decay: Vec<(u8, LengthDecayFit)>,
    pub covers: Vec<(usize, CoverReport, DistortionGap)>,
}

/// Full result of a run: per-stage outcomes, criteria verdicts, and the
/// artifacts behind the plot files.
#[derive(Serialize)]
pub struct RunBundle {
    pub config: ExperimentConfig,
    pub stages: Vec<StageOutcome>,
    pub criteria: Vec<CriterionOutcome>,
    #[serde(skip)]
    pub artifacts: RunArtifacts,
}

impl RunBundle {
    /// Exit code of the first stage failure, if any.
    pub fn first_error_code(&self) -> Option<i32> {
        self.stages.iter().find_map(|s| s.exit_code)
    }

    pub fn criteria_failed(&self) -> bool {
        self.criteria.iter().any(|c| !c.passed)
    }

    pub fn stage(&self, name: &str) -> Option<&StageOutcome> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Numbers the criteria read, collected while stages run.
#[derive(Default)]
struct Measured {
    rho_error_max: Option<f64>,
    denjoy_violations_max: Option<usize>,
    neg_control_violations_max: Option<usize>,
    decay_excess_max: Option<f64>,
    smooth: Option<(bool, f64)>,
    brk: Option<(bool, f64)>,
    oracle_defect: Option<f64>,
    equivariance: Option<(f64, f64)>,
    covers_complete: bool,
}

fn scalar_f64(s: &Scalar) -> f64 {
    s.to_f64()
}

fn rho_json(est: &RotationEstimate) -> serde_json::Value {
    json!({
        "value": scalar_f64(&est.value),
        "error_bound": scalar_f64(&est.error_bound),
        "iterations_used": est.iterations_used,
        "rational": est.rational,
    })
}

fn stage_rho(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    cache: &mut RunCache,
    measured: &mut Measured,
) -> Result<serde_json::Value> {
    let prec = Precision::new(config.precision_bits)?;
    let budget = config.orbit_budget.min(1 << 17);
    let (rho1, rho2) = match cache.cached_rho(prec) {
        Some(pair_est) => pair_est,
        None => {
            let r1 = rotation_number(pair.map1.as_ref(), budget)?;
            let r2 = rotation_number(pair.map2.as_ref(), budget)?;
            (r1, r2)
        }
    };
    cache.pending.rho1 = Some(CachedRho::from_estimate(&rho1));
    cache.pending.rho2 = Some(CachedRho::from_estimate(&rho2));
    measured.rho_error_max = Some(
        scalar_f64(&rho1.error_bound).max(scalar_f64(&rho2.error_bound)),
    );

    let depth = config
        .levels
        .iter()
        .chain(config.cover_levels.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .clamp(8, 24)
        + 1;
    let cf = closest_return_quotients(pair.map1.as_ref(), &pair.x0, depth, config.orbit_budget)?;
    let gap = (scalar_f64(&rho1.value) - scalar_f64(&rho2.value)).abs();
    let gap = gap.min(1.0 - gap);
    Ok(json!({
        "budget": budget,
        "rho1": rho_json(&rho1),
        "rho2": rho_json(&rho2),
        "gap": gap,
        "quotients": cf.quotients,
        "p": cf.p,
        "q": cf.q,
        "recurrence_ok": cf.verify_recurrence(),
    }))
}

fn stage_partition(config: &ExperimentConfig, pair: &PreparedPair) -> Result<serde_json::Value> {
    let mut rows = Vec::new();
    for &n in &config.levels {
        let coarse = dynamical_partition(pair.map1.as_ref(), &pair.x0, n - 1)?;
        let part = dynamical_partition(pair.map1.as_ref(), &pair.x0, n)?;
        coarse.verify_refined_by(&part)?;
        let (qn_prev, qn) = part.q_values();
        rows.push(json!({
            "n": n,
            "qn_prev": qn_prev,
            "qn": qn,
            "intervals": part.interval_count(),
            "max_length": scalar_f64(&part.max_length()),
            "refines_previous": true,
        }));
    }
    Ok(json!({ "levels": rows }))
}

fn stage_denjoy(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    measured: &mut Measured,
) -> Result<serde_json::Value> {
    let prec = Precision::new(config.precision_bits)?;
    let mut rows = Vec::new();
    let mut worst = 0usize;
    let mut best_neg = 0usize;
    for &n in &config.levels {
        let report = denjoy_report(pair.map1.as_ref(), &pair.x0, n, config.denjoy_samples)?;
        let neg_w = &Scalar::from_f64(NEGATIVE_CONTROL_FACTOR, prec) * &report.v;
        let neg = report.violations_against(&neg_w);
        let max_abs_ln = report
            .products
            .iter()
            .chain(report.ratio_samples.iter())
            .map(|s| s.ln().abs().to_f64())
            .fold(0.0f64, f64::max);
        worst = worst.max(report.violations);
        best_neg = best_neg.max(neg);
        rows.push(json!({
            "n": n,
            "v": scalar_f64(&report.v),
            "samples": config.denjoy_samples,
            "violations": report.violations,
            "collisions": report.collisions,
            "max_abs_ln": max_abs_ln,
            "negative_control_factor": NEGATIVE_CONTROL_FACTOR,
            "negative_control_violations": neg,
        }));
    }
    measured.denjoy_violations_max = Some(worst);
    measured.neg_control_violations_max = Some(best_neg);
    Ok(json!({ "levels": rows }))
}

fn decay_json(fit: &LengthDecayFit) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = fit
        .max_lengths
        .iter()
        .enumerate()
        .map(|(i, l)| {
            json!({
                "n": i + 1,
                "q": fit.q_values[i],
                "max_length": scalar_f64(l),
                "rate_from_prev": if i == 0 {
                    serde_json::Value::Null
                } else {
                    json!(scalar_f64(&fit.rates[i - 1]))
                },
            })
        })
        .collect();
    json!({
        "fitted_rate": scalar_f64(&fit.fitted_rate),
        "lambda_bound": scalar_f64(&fit.lambda_bound),
        "offset_n0": fit.offset_n0,
        "levels": rows,
    })
}

fn stage_decay(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    measured: &mut Measured,
    artifacts: &mut RunArtifacts,
) -> Result<serde_json::Value> {
    let fit1 = length_decay_fit(pair.map1.as_ref(), &pair.x0, config.decay_n_max)?;
    let fit2 = length_decay_fit(pair.map2.as_ref(), &pair.t0, config.decay_n_max)?;
    let excess = |fit: &LengthDecayFit| scalar_f64(&fit.fitted_rate) - scalar_f64(&fit.lambda_bound);
    measured.decay_excess_max = Some(excess(&fit1).max(excess(&fit2)));
    let value = json!({ "map1": decay_json(&fit1), "map2": decay_json(&fit2) });
    artifacts.decay.push((1, fit1));
    artifacts.decay.push((2, fit2));
    Ok(value)
}

fn regression_json(report: &RegressionReport) -> serde_json::Value {
    serde_json::to_value(report).unwrap_or(serde_json::Value::Null)
}

fn stage_distortion(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    measured: &mut Measured,
) -> Result<serde_json::Value> {
    let prec = Precision::new(config.precision_bits)?;
    let smooth = distortion_residuals(pair.map1.as_ref(), ResidualMode::Smooth, config.residual_trials)?;
    measured.smooth = Some((smooth.exact_family, smooth.slope));
    let mut value = json!({ "smooth": regression_json(&smooth) });

    if !pair.map1.breaks().is_empty() {
        let brk = distortion_residuals(pair.map1.as_ref(), ResidualMode::Break, config.residual_trials)?;
        measured.brk = Some((brk.exact_family, brk.slope));
        value["break"] = regression_json(&brk);
    }

    let jumps = |map: &dyn CircleMap| -> Vec<Scalar> {
        map.breaks().iter().map(|b| b.jump.clone()).collect()
    };
    let jumps1 = jumps(pair.map1.as_ref());
    let jumps2 = jumps(pair.map2.as_ref());
    let product = |js: &[Scalar]| {
        js.iter()
            .fold(Scalar::one(prec), |acc, j| &acc * j)
            .to_f64()
    };
    let (p1, p2) = (product(&jumps1), product(&jumps2));
    if (p1 - p2).abs() > 1e-12 && p1 > 0.0 && p2 > 0.0 {
        let (omega0, theta0, lambda) = lemma52_bounds(&jumps1, &jumps2)?;
        value["jump_model"] = json!({
            "product1": p1,
            "product2": p2,
            "omega0": scalar_f64(&omega0),
            "theta0": scalar_f64(&theta0),
            "lambda": scalar_f64(&lambda),
        });
    }
    Ok(value)
}

fn stage_conjugacy(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    cache: &mut RunCache,
    measured: &mut Measured,
    artifacts: &mut RunArtifacts,
) -> Result<serde_json::Value> {
    let approx = conjugacy_table(config, pair, cache)?;
    cache.pending.table_xs = (0..approx.count())
        .map(|i| approx.pair(i).0.position().to_decimal_string())
        .collect();
    cache.pending.table_ts = (0..approx.count())
        .map(|i| approx.pair(i).1.position().to_decimal_string())
        .collect();

    let residual = scalar_f64(approx.built_residual());
    let gap = scalar_f64(approx.max_gap_x()).max(scalar_f64(approx.max_gap_t()));
    measured.equivariance = Some((residual, gap));

    let mut value = json!({
        "table_size": approx.count(),
        "max_gap_x": scalar_f64(approx.max_gap_x()),
        "max_gap_t": scalar_f64(approx.max_gap_t()),
        "equivariance_residual": residual,
        "pairing": pair.pairing,
    });
    if let Some(psi) = &pair.psi {
        let defect = scalar_f64(&smooth_oracle_compare(&approx, psi));
        measured.oracle_defect = Some(defect);
        value["oracle_defect"] = json!(defect);
    }
    artifacts.approx = Some(approx);
    Ok(value)
}

fn stage_singularity(
    config: &ExperimentConfig,
    artifacts: &mut RunArtifacts,
) -> Result<serde_json::Value> {
    let approx = artifacts.approx.as_ref().ok_or_else(|| {
        LabError::InvalidConfig("singularity stage needs a completed conjugacy table".into())
    })?;
    let prec = approx.base().0.prec();
    let report = singularity_report(approx, &config.k_range, &Scalar::from_f64(config.delta, prec))?;
    let value = serde_json::to_value(&report)?;
    artifacts.singularity = Some(report);
    Ok(value)
}

fn stage_cover(
    config: &ExperimentConfig,
    pair: &PreparedPair,
    measured: &mut Measured,
    artifacts: &mut RunArtifacts,
) -> Result<serde_json::Value> {
    let approx = artifacts.approx.as_ref().ok_or_else(|| {
        LabError::InvalidConfig("cover stage needs a completed conjugacy table".into())
    })?;
    let prec = Precision::new(config.precision_bits)?;
    let oracle = match &pair.psi {
        Some(psi) => ConjugacyOracle::with_exact(approx, psi),
        None => ConjugacyOracle::from_table(approx),
    };
    let constants = CoverConstants {
        m_big: Scalar::from_f64(config.m_big, prec),
        zeta: Scalar::from_f64(config.zeta, prec),
        delta: Scalar::from_f64(config.delta_cover, prec),
        k_override: config.k_override.map(|k| Scalar::from_f64(k, prec)),
        m0_override: config.m0_override,
        search_step: config.cover_search_step,
    };

    let mut rows = Vec::new();
    let mut first_err: Option<LabError> = None;
    for &n in &config.cover_levels {
        let outcome = regular_cover(
            pair.map1.as_ref(),
            pair.map2.as_ref(),
            &oracle,
            n,
            &pair.x0,
            &constants,
        )
        .and_then(|cover| {
            let gap = distortion_gap_experiment(pair.map1.as_ref(), pair.map2.as_ref(), &cover)?;
            Ok((cover, gap))
        });
        match outcome {
            Ok((cover, gap)) => {
                let mut row = cover.to_json();
                row["gap"] = json!({
                    "gap": scalar_f64(&gap.gap),
                    "bound": scalar_f64(&gap.bound),
                    "dist1": scalar_f64(&gap.dist1),
                    "dist2": scalar_f64(&gap.dist2),
                });
                rows.push(row);
                artifacts.covers.push((n, cover, gap));
            }
            Err(e) => {
                rows.push(json!({ "n": n, "error": e.to_string() }));
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    measured.covers_complete =
        first_err.is_none() && artifacts.covers.len() == config.cover_levels.len();
    let value = json!({ "levels": rows });
    match first_err {
        // Partial rows are kept by the caller next to the error.
        Some(e) => Err(attach_partial(e, value)),
        None => Ok(value),
    }
}

thread_local! {
    static PARTIAL: std::cell::RefCell<Option<serde_json::Value>> =
        const { std::cell::RefCell::new(None) };
}

fn attach_partial(err: LabError, data: serde_json::Value) -> LabError {
    PARTIAL.with(|slot| *slot.borrow_mut() = Some(data));
    err
}

fn take_partial() -> Option<serde_json::Value> {
    PARTIAL.with(|slot| slot.borrow_mut().take())
}

fn evaluate_criteria(
    config: &ExperimentConfig,
    measured: &Measured,
    artifacts: &RunArtifacts,
) -> Vec<CriterionOutcome> {
    let spec = &config.criteria;
    let mut out = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        out.push(CriterionOutcome {
            name: name.into(),
            passed,
            detail,
        });
    };

    if let Some(limit) = spec.max_rho_error {
        match measured.rho_error_max {
            Some(err) => push(
                "rho_error",
                err <= limit,
                format!("max rotation error bound {err:.3e}, limit {limit:.3e}"),
            ),
            None => push("rho_error", false, "rho stage did not complete".into()),
        }
    }
    if let Some(limit) = spec.max_denjoy_violations {
        match measured.denjoy_violations_max {
            Some(v) => push(
                "denjoy_violations",
                v <= limit,
                format!("worst level had {v} violations, limit {limit}"),
            ),
            None => push("denjoy_violations", false, "denjoy stage did not complete".into()),
        }
    }
    if let Some(min) = spec.min_negative_control_violations {
        match measured.neg_control_violations_max {
            Some(v) => push(
                "negative_control",
                v >= min,
                format!("corrupted bound registered {v} violations, needed {min}"),
            ),
            None => push("negative_control", false, "denjoy stage did not complete".into()),
        }
    }
    if let Some(limit) = spec.max_decay_rate_excess {
        match measured.decay_excess_max {
            Some(e) => push(
                "length_decay",
                e <= limit,
                format!("worst fitted rate exceeds the bound by {e:.4}, limit {limit:.4}"),
            ),
            None => push("length_decay", false, "decay stage did not complete".into()),
        }
    }
    if let Some(min) = spec.min_smooth_slope {
        match measured.smooth {
            Some((exact, slope)) => push(
                "smooth_residuals",
                exact || slope >= min,
                if exact {
                    "smooth residuals sit at rounding level".into()
                } else {
                    format!("smooth residual slope {slope:.3}, needed {min:.3}")
                },
            ),
            None => push("smooth_residuals", false, "distortion stage did not complete".into()),
        }
    }
    if let Some(min) = spec.min_break_slope {
        match measured.brk {
            Some((_, slope)) => push(
                "break_residuals",
                slope >= min,
                format!("break residual slope {slope:.3}, needed {min:.3}"),
            ),
            None => push("break_residuals", false, "no break-mode regression ran".into()),
        }
    }
    if let Some(limit) = spec.max_oracle_defect {
        match measured.oracle_defect {
            Some(d) => push(
                "oracle_defect",
                d <= limit,
                format!("largest table defect against psi {d:.3e}, limit {limit:.3e}"),
            ),
            None => push("oracle_defect", false, "no closed-form conjugator available".into()),
        }
    }
    if let Some(factor) = spec.max_equivariance_gap_factor {
        match measured.equivariance {
            Some((residual, gap)) => push(
                "equivariance",
                residual <= factor * gap,
                format!("residual {residual:.3e} vs {factor} x max gap {gap:.3e}"),
            ),
            None => push("equivariance", false, "conjugacy stage did not complete".into()),
        }
    }
    if let Some(trend) = &spec.singularity_trend {
        let outcome = artifacts.singularity.as_ref().and_then(|report| {
            let level = |k: u32| report.levels.iter().find(|l| l.k == k);
            Some((level(trend.k_lo)?, level(trend.k_hi)?))
        });
        match outcome {
            Some((lo, hi)) => {
                let ratio = hi.mass_measure / lo.mass_measure;
                let drop = lo.median_log10_slope - hi.median_log10_slope;
                push(
                    "singularity_trend",
                    ratio < trend.max_mass_ratio && drop >= trend.min_median_drop,
                    format!(
                        "mass ratio m({})/m({}) = {ratio:.3} (limit {}), median drop {drop:.3} decades (needed {})",
                        trend.k_hi, trend.k_lo, trend.max_mass_ratio, trend.min_median_drop
                    ),
                );
            }
            None => push(
                "singularity_trend",
                false,
                format!(
                    "singularity levels {} and {} not measured",
                    trend.k_lo, trend.k_hi
                ),
            ),
        }
    }
    if let Some(floor) = spec.min_mass_floor {
        match artifacts.singularity.as_ref() {
            Some(report) => {
                let worst = report
                    .levels
                    .iter()
                    .map(|l| l.mass_measure)
                    .fold(f64::INFINITY, f64::min);
                push(
                    "mass_floor",
                    worst >= floor,
                    format!("smallest mass capture {worst:.3}, floor {floor:.3}"),
                );
            }
            None => push("mass_floor", false, "singularity stage did not complete".into()),
        }
    }
    if let Some(offset) = spec.min_gap_over_bound {
        if measured.covers_complete && !artifacts.covers.is_empty() {
            let mut worst_margin = f64::INFINITY;
            for (_, _, gap) in &artifacts.covers {
                worst_margin =
                    worst_margin.min(scalar_f64(&gap.gap) - (scalar_f64(&gap.bound) + offset));
            }
            push(
                "gap_over_bound",
                worst_margin >= 0.0,
                format!("worst gap margin over bound{offset:+} is {worst_margin:.4}"),
            );
        } else {
            push("gap_over_bound", false, "cover stage did not complete all levels".into());
        }
    }
    if let Some(limit) = spec.max_gap {
        if measured.covers_complete && !artifacts.covers.is_empty() {
            let worst = artifacts
                .covers
                .iter()
                .map(|(_, _, gap)| scalar_f64(&gap.gap))
                .fold(0.0f64, f64::max);
            push(
                "gap_ceiling",
                worst <= limit,
                format!("largest gap {worst:.4}, ceiling {limit:.4}"),
            );
        } else {
            push("gap_ceiling", false, "cover stage did not complete all levels".into());
        }
    }
    out
}

/// Run every requested stage of a config and write `report.json`.
///
/// Stage failures are recorded in the bundle rather than returned, so a
/// partial run still produces a report; the returned error covers only
/// invalid configs and filesystem problems. The caller picks the process
/// exit code from [`RunBundle::first_error_code`] and
/// [`RunBundle::criteria_failed`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunBundle> {
    config.validate()?;
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;
    let mut cache = RunCache::open(config)?;
    let mut measured = Measured::default();
    let mut bundle = RunBundle {
        config: config.clone(),
        stages: Vec::new(),
        criteria: Vec::new(),
        artifacts: RunArtifacts::default(),
    };

    let pair = match prepare_pair(config, &cache) {
        Ok(p) => {
            cache.pending.lift_shift1 = p.lift_shift1.to_decimal_string();
            cache.pending.lift_shift2 = p.lift_shift2.to_decimal_string();
            bundle.stages.push(StageOutcome {
                name: "tune".into(),
                status: "ok".into(),
                error: None,
                exit_code: None,
                data: json!({
                    "lift_shift1": scalar_f64(&p.lift_shift1),
                    "lift_shift2": scalar_f64(&p.lift_shift2),
                    "pairing": p.pairing,
                    "x0": p.x0.to_f64(),
                    "t0": p.t0.to_f64(),
                    "precision_bits": config.precision_bits,
                }),
            });
            Some(p)
        }
        Err(e) => {
            bundle.stages.push(StageOutcome {
                name: "tune".into(),
                status: "error".into(),
                exit_code: Some(e.exit_code()),
                error: Some(e.to_string()),
                data: serde_json::Value::Null,
            });
            None
        }
    };

    for &name in STAGE_ORDER.iter() {
        if !config.wants(name) {
            continue;
        }
        let Some(pair) = pair.as_ref() else {
            bundle.stages.push(StageOutcome {
                name: name.into(),
                status: "skipped".into(),
                error: Some("map preparation failed".into()),
                exit_code: None,
                data: serde_json::Value::Null,
            });
            continue;
        };
        let needs_table = name == "singularity" || name == "cover";
        if needs_table && bundle.artifacts.approx.is_none() {
            bundle.stages.push(StageOutcome {
                name: name.into(),
                status: "skipped".into(),
                error: Some("conjugacy table unavailable".into()),
                exit_code: None,
                data: serde_json::Value::Null,
            });
            continue;
        }
        let result = match name {
            "rho" => stage_rho(config, pair, &mut cache, &mut measured),
            "partition" => stage_partition(config, pair),
            "denjoy" => stage_denjoy(config, pair, &mut measured),
            "decay" => stage_decay(config, pair, &mut measured, &mut bundle.artifacts),
            "distortion" => stage_distortion(config, pair, &mut measured),
            "conjugacy" => {
                stage_conjugacy(config, pair, &mut cache, &mut measured, &mut bundle.artifacts)
            }
            "singularity" => stage_singularity(config, &mut bundle.artifacts),
            "cover" => stage_cover(config, pair, &mut measured, &mut bundle.artifacts),
            _ => unreachable!("validated stage name"),
        };
        match result {
            Ok(data) => bundle.stages.push(StageOutcome {
                name: name.into(),
                status: "ok".into(),
                error: None,
                exit_code: None,
                data,
            }),
            Err(e) => bundle.stages.push(StageOutcome {
                name: name.into(),
                status: "error".into(),
                exit_code: Some(e.exit_code()),
                error: Some(e.to_string()),
                data: take_partial().unwrap_or(serde_json::Value::Null),
            }),
        }
    }

    if !config.criteria.is_empty() {
        bundle.criteria = evaluate_criteria(config, &measured, &bundle.artifacts);
    }

    let report = serde_json::to_string_pretty(&bundle)? + "\n";
    fs::write(out_dir.join("report.json"), report)?;
    if let Err(e) = cache.persist() {
        eprintln!("warning: could not persist the run cache: {e}");
    }
    Ok(bundle)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn f64_field(x: f64) -> String {
    format!("{x}")
}

/// Write the plot-data CSVs of a completed run into `dir` and return the
/// paths written. Files whose backing stage did not run are skipped.
pub fn emit_plot_data(bundle: &RunBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    if let Some(approx) = &bundle.artifacts.approx {
        let prec = approx.base().0.prec();
        let mut rows = Vec::with_capacity(CONJUGACY_GRAPH_SAMPLES);
        for j in 0..CONJUGACY_GRAPH_SAMPLES {
            let x = j as f64 / CONJUGACY_GRAPH_SAMPLES as f64;
            let h = crate::conjugacy::eval_h(approx, &CirclePoint::from_f64(x, prec));
            rows.push(vec![f64_field(x), f64_field(h.to_f64())]);
        }
        let path = dir.join("conjugacy_graph.csv");
        write_csv(&path, &["x", "h_x"], &rows)?;
        written.push(path);
    }

    if let Some(report) = &bundle.artifacts.singularity {
        let mut hist_rows = Vec::new();
        let mut mass_rows = Vec::new();
        for level in &report.levels {
            for (b, count) in level.histogram.iter().enumerate() {
                hist_rows.push(vec![
                    level.k.to_string(),
                    f64_field(report.bin_edges[b]),
                    f64_field(report.bin_edges[b + 1]),
                    count.to_string(),
                ]);
            }
            mass_rows.push(vec![
                level.k.to_string(),
                f64_field(report.delta),
                f64_field(level.mass_measure),
                f64_field(level.median_log10_slope),
            ]);
        }
        let hist_path = dir.join("slope_histograms.csv");
        write_csv(&hist_path, &["k", "bin_lo", "bin_hi", "count"], &hist_rows)?;
        written.push(hist_path);
        let mass_path = dir.join("mass_capture.csv");
        write_csv(
            &mass_path,
            &["k", "delta", "mass_measure", "median_log10_slope"],
            &mass_rows,
        )?;
        written.push(mass_path);
    }

    if !bundle.artifacts.decay.is_empty() {
        let mut rows = Vec::new();
        for (map_index, fit) in &bundle.artifacts.decay {
            for (i, l) in fit.max_lengths.iter().enumerate() {
                rows.push(vec![
                    map_index.to_string(),
                    (i + 1).to_string(),
                    fit.q_values[i].to_string(),
                    f64_field(l.to_f64()),
                    if i == 0 {
                        String::new()
                    } else {
                        f64_field(fit.rates[i - 1].to_f64())
                    },
                ]);
            }
        }
        let path = dir.join("decay_rates.csv");
        write_csv(&path, &["map", "n", "q_n", "max_length", "rate_from_prev"], &rows)?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation_spec(shift: f64) -> MapSpec {
        MapSpec::mobius(vec![], shift, 53)
    }

    fn identity_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            name: "identity".into(),
            map1: rotation_spec(0.6180339887498949),
            map2: rotation_spec(0.6180339887498949),
            rotation_target: None,
            tune_tolerance: default_tune_tolerance(),
            orbit_budget: 1 << 16,
            precision_bits: 53,
            seed: 0,
            base_point: 0.13,
            base_point_2: None,
            table_size: 512,
            k_range: vec![4, 6],
            delta: 0.1,
            levels: vec![4, 6],
            denjoy_samples: 40,
            decay_n_max: 8,
            residual_trials: 8,
            cover_levels: vec![],
            cover_search_step: COVER_SEARCH_STEP,
            m_big: 3.0,
            zeta: 0.5,
            delta_cover: 0.1,
            m0_override: None,
            k_override: None,
            diagnostics: default_diagnostics(),
            criteria: CriteriaSpec {
                max_rho_error: Some(1e-8),
                max_denjoy_violations: Some(0),
                max_decay_rate_excess: Some(0.02),
                min_smooth_slope: Some(1.8),
                max_equivariance_gap_factor: Some(10.0),
                min_mass_floor: Some(0.2),
                ..CriteriaSpec::default()
            },
            output_dir: dir.to_string_lossy().into_owned(),
        }
    }

    #[test]
    fn config_defaults_round_trip() {
        let text = r#"{
            "name": "t",
            "map1": {"breaks": [], "lift_shift": 0.5, "family": "mobius"},
            "map2": {"breaks": [], "lift_shift": 0.5, "family": "mobius"},
            "base_point": 0.13,
            "output_dir": "out/t"
        }"#;
        let config = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(config.orbit_budget, default_orbit_budget());
        assert_eq!(config.diagnostics, default_diagnostics());
        assert!(config.criteria.is_empty());
        let echoed = ExperimentConfig::from_json(&config.canonical_json().unwrap()).unwrap();
        assert_eq!(config, echoed);
    }

    #[test]
    fn unknown_fields_and_stages_are_rejected() {
        let text = r#"{
            "name": "t",
            "map1": {"breaks": [], "lift_shift": 0.5, "family": "mobius"},
            "map2": {"breaks": [], "lift_shift": 0.5, "family": "mobius"},
            "base_point": 0.13,
            "output_dir": "o",
            "mystery_knob": 7
        }"#;
        assert!(ExperimentConfig::from_json(text).is_err());

        let mut config = identity_config(Path::new("o"));
        config.diagnostics = vec!["rho".into(), "warp".into()];
        let err = config.validate().unwrap_err();
        assert!(matches!(err, LabError::InvalidConfig(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn singularity_requires_conjugacy_stage() {
        let mut config = identity_config(Path::new("o"));
        config.diagnostics = vec!["singularity".into()];
        assert!(config.validate().is_err());
    }

    #[test]
    fn cache_key_ignores_formatting() {
        let config = identity_config(Path::new("o"));
        let text = serde_json::to_string_pretty(&config).unwrap();
        let reparsed = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cache_key(&config).unwrap(), cache_key(&reparsed).unwrap());
        let mut other = config.clone();
        other.seed = 1;
        assert_ne!(cache_key(&config).unwrap(), cache_key(&other).unwrap());
    }

    #[test]
    fn cached_scalar_strings_round_trip_exactly() {
        let prec = Precision::new(128).unwrap();
        let values = [
            Scalar::from_ratio(2, 3, prec).sqrt(),
            Scalar::from_f64(0.6180339887498949, prec).ln().abs(),
            Scalar::from_ratio(-7, 11, prec).exp(),
        ];
        for v in values {
            let back = Scalar::parse(&v.to_decimal_string(), prec).unwrap();
            assert!((&back - &v).is_zero(), "{} reparsed as {}", v, back);
        }
    }

    #[test]
    fn pair_classification_covers_the_presets() {
        let mut config = identity_config(Path::new("o"));
        assert!(!is_exact_psi_pair(&config));
        assert!(!is_partner_rotation(&config));

        config.map1 = MapSpec::mobius(vec![(0.5, 2.0)], 0.61, 53);
        config.map2 = rotation_spec(0.61);
        config.rotation_target = Some(0.6180339887498949);
        assert!(is_partner_rotation(&config));

        let mut psi_spec = MapSpec::mobius(vec![(0.5, 2.0)], 0.61, 53);
        psi_spec.family = "psi_mobius".into();
        psi_spec.psi_amplitude = Some(0.35);
        config.map2 = psi_spec;
        assert!(is_exact_psi_pair(&config));
        assert!(!is_partner_rotation(&config));
    }

    #[test]
    fn identity_run_is_deterministic_and_cache_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let config = identity_config(dir.path());

        let fresh = run_experiment(&config).unwrap();
        assert!(fresh.first_error_code().is_none(), "{:?}", fresh.stages.iter().map(|s| (&s.name, &s.error)).collect::<Vec<_>>());
        assert!(!fresh.criteria_failed(), "{:?}", fresh.criteria.iter().map(|c| (&c.name, c.passed, &c.detail)).collect::<Vec<_>>());
        let report1 = fs::read(dir.path().join("report.json")).unwrap();
        let plots1 = emit_plot_data(&fresh, dir.path()).unwrap();
        assert!(!plots1.is_empty());
        let graph1 = fs::read(dir.path().join("conjugacy_graph.csv")).unwrap();

        let cache = RunCache::open(&config).unwrap();
        assert!(cache.hit());

        let cached = run_experiment(&config).unwrap();
        assert!(cached.first_error_code().is_none());
        let report2 = fs::read(dir.path().join("report.json")).unwrap();
        emit_plot_data(&cached, dir.path()).unwrap();
        let graph2 = fs::read(dir.path().join("conjugacy_graph.csv")).unwrap();

        assert_eq!(report1, report2);
        assert_eq!(graph1, graph2);
    }

    #[test]
    fn identity_graph_is_the_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = identity_config(dir.path());
        config.diagnostics = vec!["conjugacy".into()];
        let bundle = run_experiment(&config).unwrap();
        let approx = bundle.artifacts.approx.as_ref().unwrap();
        let prec = Precision::DOUBLE;
        for j in 0..64 {
            let x = CirclePoint::from_f64(j as f64 / 64.0, prec);
            let h = crate::conjugacy::eval_h(approx, &x);
            assert!(
                crate::circle::circular_distance(&x, &h).to_f64() < 1e-9,
                "h({}) = {}",
                x.to_f64(),
                h.to_f64()
            );
        }
    }

    #[test]
    fn failing_criterion_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = identity_config(dir.path());
        config.diagnostics = vec!["rho".into()];
        config.criteria = CriteriaSpec {
            max_rho_error: Some(1e-30),
            ..CriteriaSpec::default()
        };
        let bundle = run_experiment(&config).unwrap();
        assert!(bundle.first_error_code().is_none());
        assert!(bundle.criteria_failed());
        assert_eq!(bundle.criteria.len(), 1);
        assert_eq!(bundle.criteria[0].name, "rho_error");
    }

    #[test]
    fn stage_error_keeps_partial_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = identity_config(dir.path());
        // A rotation pair carries no jumps, so the cover planner refuses it
        // while every earlier stage still reports.
        config.diagnostics = vec!["rho".into(), "conjugacy".into(), "cover".into()];
        config.cover_levels = vec![7];
        let bundle = run_experiment(&config).unwrap();
        assert_eq!(bundle.stage("rho").unwrap().status, "ok");
        assert_eq!(bundle.stage("conjugacy").unwrap().status, "ok");
        let cover = bundle.stage("cover").unwrap();
        assert_eq!(cover.status, "error");
        assert_eq!(bundle.first_error_code(), cover.exit_code);
        assert!(cover.data["levels"][0]["error"].is_string());
    }
}
