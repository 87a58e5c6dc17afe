//! Numerical laboratory for circle homeomorphisms with break points.
//!
//! The crate builds piecewise-smooth circle maps whose derivative jumps at
//! finitely many break points, estimates rotation numbers and continued
//! fractions from orbits, constructs dynamical partitions, measures
//! cross-ratio distortion, approximates conjugacies between maps with equal
//! irrational rotation number, and runs the covering-interval experiments
//! that exhibit the singularity of such conjugacies when the total jumps of
//! the two maps differ.
//!
//! Module map:
//! - [`scalar`], [`circle`]: configurable-precision reals and circle geometry
//! - [`map`]: P-homeomorphism construction, evaluation, iteration
//! - [`rotation`]: rotation numbers, continued fractions, parameter tuning
//! - [`partition`]: dynamical partitions and length-decay diagnostics
//! - [`crossratio`]: cross-ratio distortion tools and jump-model bounds
//! - [`conjugacy`]: conjugacy tables and singularity diagnostics
//! - [`covering`]: break-point preimage clustering and covering intervals
//! - [`lab`]: experiment configs, presets, cached runs, report emission

pub mod circle;
pub mod conjugacy;
pub mod covering;
pub mod crossratio;
pub mod error;
pub mod lab;
pub mod map;
pub mod partition;
pub mod rotation;
pub mod scalar;

pub use circle::{ccw_ordered, reduce_mod_one, Arc, CirclePoint};
pub use conjugacy::{build_conjugacy, eval_h, ConjugacyApprox, SingularityReport};
pub use covering::{regular_cover, CoverConstants, CoverReport};
pub use error::{LabError, Result};
pub use lab::{emit_plot_data, run_experiment, ExperimentConfig, RunBundle};
pub use map::{make_piecewise_mobius, BreakSpec, CircleMap, MapSpec, MobiusMap, SineDiffeo};
pub use partition::{dynamical_partition, DynamicalPartition};
pub use rotation::{rotation_number, tune_parameter, RotationEstimate};
pub use scalar::{Precision, Scalar};
