//! Command-line front end of the laboratory.
//!
//! `lab run` executes a full experiment config; the remaining subcommands
//! expose single diagnostics for quick inspection, reading either a map
//! spec file or an experiment config. JSON is the default output format;
//! tabular diagnostics also emit CSV. Exit codes: 0 on success, 2 for
//! invalid specs or configs, 3 for numerical failures, 4 when a configured
//! criterion fails.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use breaklab::circle::CirclePoint;
use breaklab::conjugacy::{eval_h, singularity_report, smooth_oracle_compare};
use breaklab::covering::{distortion_gap_experiment, regular_cover, ConjugacyOracle, CoverConstants};
use breaklab::crossratio::{distortion_residuals, ResidualMode};
use breaklab::error::{LabError, Result};
use breaklab::lab::{
    emit_plot_data, prepared_table, run_experiment, ExperimentConfig, CONJUGACY_GRAPH_SAMPLES,
    NEGATIVE_CONTROL_FACTOR,
};
use breaklab::map::{CircleMap, MapSpec};
use breaklab::partition::{denjoy_report, dynamical_partition, length_decay_fit};
use breaklab::rotation::{closest_return_quotients, continued_fraction_of, rotation_number};
use breaklab::scalar::{Precision, Scalar};

#[derive(Parser)]
#[command(
    name = "lab",
    version,
    about = "Numerical laboratory for circle maps with break points"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Smooth,
    Break,
}

#[derive(Args)]
struct MapInput {
    /// Map spec file (JSON).
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    /// Orbit base point.
    #[arg(long, default_value_t = 0.13)]
    x0: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config: tune, diagnose, write report and plots.
    Run {
        config: PathBuf,
    },
    /// Estimate the rotation number of a map.
    Rho {
        #[arg(long, value_name = "FILE")]
        map: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        budget: u64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Continued-fraction quotients, from map orbits or from a number.
    Cf {
        /// Map spec file; mutually exclusive with --value.
        #[arg(long, value_name = "FILE", conflicts_with = "value")]
        map: Option<PathBuf>,
        /// Expand this number instead of measuring a map.
        #[arg(long)]
        value: Option<f64>,
        #[arg(long, default_value_t = 0.13)]
        x0: f64,
        #[arg(long, default_value_t = 15)]
        depth: usize,
        #[arg(long, default_value_t = 1_000_000)]
        budget: u64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Dynamical partition of a level: interval counts and lengths.
    Partition {
        #[command(flatten)]
        input: MapInput,
        #[arg(long)]
        level: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Denjoy-inequality check over partition intervals.
    Denjoy {
        #[command(flatten)]
        input: MapInput,
        #[arg(long)]
        level: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Exponential decay fit of partition interval lengths.
    Decay {
        #[command(flatten)]
        input: MapInput,
        #[arg(long, default_value_t = 12)]
        n_max: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Cross-ratio distortion residual regression.
    Distortion {
        #[arg(long, value_name = "FILE")]
        map: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Smooth)]
        mode: Mode,
        #[arg(long, default_value_t = 24)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Build the conjugacy table of a config pair.
    Conjugacy {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Also write the sampled graph of h as CSV.
        #[arg(long, value_name = "FILE")]
        graph_out: Option<PathBuf>,
    },
    /// Dyadic singularity diagnostics of the conjugacy.
    Singularity {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
    },
    /// Covering-interval construction and distortion-gap experiment.
    Cover {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Run a single level instead of the configured list.
        #[arg(long)]
        level: Option<usize>,
    },
}

fn load_map(path: &Path) -> Result<(Box<dyn CircleMap>, Precision)> {
    let spec = MapSpec::from_json(&fs::read_to_string(path)?)?;
    let prec = spec.precision()?;
    Ok((spec.build()?, prec))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::from_file(path)?;
    config.validate()?;
    Ok(config)
}

/// Write a line to stdout, exiting quietly when the reading side of a
/// pipe has closed.
fn say(text: impl std::fmt::Display) {
    use io::Write;
    let mut out = io::stdout().lock();
    if writeln!(out, "{text}").is_err() {
        std::process::exit(0);
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    say(serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_csv(header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| LabError::InvalidConfig(e.to_string()))?;
    let text = String::from_utf8_lossy(&bytes);
    say(text.trim_end_matches('\n'));
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn cmd_run(path: &Path) -> Result<i32> {
    let config = load_config(path)?;
    let bundle = run_experiment(&config)?;
    for stage in &bundle.stages {
        match &stage.error {
            Some(msg) => say(format!("stage {}: {} ({msg})", stage.name, stage.status)),
            None => say(format!("stage {}: {}", stage.name, stage.status)),
        }
    }
    for criterion in &bundle.criteria {
        let verdict = if criterion.passed { "pass" } else { "FAIL" };
        say(format!("criterion {}: {verdict} ({})", criterion.name, criterion.detail));
    }
    let out_dir = PathBuf::from(&config.output_dir);
    let plots = emit_plot_data(&bundle, &out_dir)?;
    say(format!("report: {}", out_dir.join("report.json").display()));
    for plot in plots {
        say(format!("plot: {}", plot.display()));
    }
    if let Some(code) = bundle.first_error_code() {
        return Ok(code);
    }
    if bundle.criteria_failed() {
        return Ok(LabError::CriterionFailed("criteria failed".into()).exit_code());
    }
    Ok(0)
}

fn cmd_rho(map_path: &Path, budget: u64, format: Format) -> Result<()> {
    let (map, _) = load_map(map_path)?;
    let est = rotation_number(map.as_ref(), budget)?;
    match format {
        Format::Json => print_json(&json!({
            "value": est.value.to_f64(),
            "error_bound": est.error_bound.to_f64(),
            "iterations_used": est.iterations_used,
            "rational": est.rational,
        })),
        Format::Csv => print_csv(
            &["value", "error_bound", "iterations_used", "rational"],
            &[vec![
                num(est.value.to_f64()),
                num(est.error_bound.to_f64()),
                est.iterations_used.to_string(),
                est.rational.to_string(),
            ]],
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_cf(
    map_path: Option<&Path>,
    value: Option<f64>,
    x0: f64,
    depth: usize,
    budget: u64,
    format: Format,
) -> Result<()> {
    let cf = match (map_path, value) {
        (Some(path), None) => {
            let (map, prec) = load_map(path)?;
            closest_return_quotients(map.as_ref(), &CirclePoint::from_f64(x0, prec), depth, budget)?
        }
        (None, Some(v)) => {
            continued_fraction_of(&Scalar::from_f64(v, Precision::DOUBLE), depth)?
        }
        _ => {
            return Err(LabError::InvalidConfig(
                "pass exactly one of --map or --value".into(),
            ))
        }
    };
    match format {
        Format::Json => print_json(&json!({
            "quotients": cf.quotients,
            "p": cf.p,
            "q": cf.q,
            "recurrence_ok": cf.verify_recurrence(),
        })),
        Format::Csv => {
            let rows: Vec<Vec<String>> = cf
                .quotients
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    vec![
                        (i + 1).to_string(),
                        a.to_string(),
                        cf.p[i].to_string(),
                        cf.q[i].to_string(),
                    ]
                })
                .collect();
            print_csv(&["n", "a_n", "p_n", "q_n"], &rows)
        }
    }
}

fn cmd_partition(input: &MapInput, level: usize, format: Format) -> Result<()> {
    let (map, prec) = load_map(&input.map)?;
    let x0 = CirclePoint::from_f64(input.x0, prec);
    let part = dynamical_partition(map.as_ref(), &x0, level)?;
    let (qn_prev, qn) = part.q_values();
    let arcs = |kind: &str, arcs: &[breaklab::Arc]| -> Vec<Vec<String>> {
        arcs.iter()
            .enumerate()
            .map(|(i, arc)| {
                vec![
                    kind.to_string(),
                    i.to_string(),
                    num(arc.start().to_f64()),
                    num(arc.length().to_f64()),
                ]
            })
            .collect()
    };
    let mut rows = arcs("long", part.long_intervals());
    rows.extend(arcs("short", part.short_intervals()));
    match format {
        Format::Json => print_json(&json!({
            "level": part.level(),
            "qn_prev": qn_prev,
            "qn": qn,
            "intervals": part.interval_count(),
            "max_length": part.max_length().to_f64(),
            "arcs": rows
                .iter()
                .map(|r| json!({
                    "kind": r[0],
                    "index": r[1].parse::<usize>().unwrap_or(0),
                    "start": r[2].parse::<f64>().unwrap_or(0.0),
                    "length": r[3].parse::<f64>().unwrap_or(0.0),
                }))
                .collect::<Vec<_>>(),
        })),
        Format::Csv => print_csv(&["kind", "index", "start", "length"], &rows),
    }
}

fn cmd_denjoy(input: &MapInput, level: usize, samples: usize, format: Format) -> Result<()> {
    let (map, prec) = load_map(&input.map)?;
    let x0 = CirclePoint::from_f64(input.x0, prec);
    let report = denjoy_report(map.as_ref(), &x0, level, samples)?;
    let neg_w = &Scalar::from_f64(NEGATIVE_CONTROL_FACTOR, prec) * &report.v;
    let neg = report.violations_against(&neg_w);
    let max_abs_ln = report
        .products
        .iter()
        .chain(report.ratio_samples.iter())
        .map(|s| s.ln().abs().to_f64())
        .fold(0.0f64, f64::max);
    match format {
        Format::Json => print_json(&json!({
            "level": level,
            "v": report.v.to_f64(),
            "samples": samples,
            "violations": report.violations,
            "collisions": report.collisions,
            "max_abs_ln": max_abs_ln,
            "negative_control_factor": NEGATIVE_CONTROL_FACTOR,
            "negative_control_violations": neg,
        })),
        Format::Csv => print_csv(
            &[
                "level",
                "v",
                "samples",
                "violations",
                "collisions",
                "max_abs_ln",
                "negative_control_violations",
            ],
            &[vec![
                level.to_string(),
                num(report.v.to_f64()),
                samples.to_string(),
                report.violations.to_string(),
                report.collisions.to_string(),
                num(max_abs_ln),
                neg.to_string(),
            ]],
        ),
    }
}

fn cmd_decay(input: &MapInput, n_max: usize, format: Format) -> Result<()> {
    let (map, prec) = load_map(&input.map)?;
    let x0 = CirclePoint::from_f64(input.x0, prec);
    let fit = length_decay_fit(map.as_ref(), &x0, n_max)?;
    let rows: Vec<Vec<String>> = fit
        .max_lengths
        .iter()
        .enumerate()
        .map(|(i, l)| {
            vec![
                (i + 1).to_string(),
                fit.q_values[i].to_string(),
                num(l.to_f64()),
                if i == 0 {
                    String::new()
                } else {
                    num(fit.rates[i - 1].to_f64())
                },
            ]
        })
        .collect();
    match format {
        Format::Json => print_json(&json!({
            "fitted_rate": fit.fitted_rate.to_f64(),
            "lambda_bound": fit.lambda_bound.to_f64(),
            "offset_n0": fit.offset_n0,
            "levels": rows
                .iter()
                .map(|r| json!({
                    "n": r[0].parse::<usize>().unwrap_or(0),
                    "q": r[1].parse::<i64>().unwrap_or(0),
                    "max_length": r[2].parse::<f64>().unwrap_or(0.0),
                    "rate_from_prev": if r[3].is_empty() {
                        serde_json::Value::Null
                    } else {
                        json!(r[3].parse::<f64>().unwrap_or(0.0))
                    },
                }))
                .collect::<Vec<_>>(),
        })),
        Format::Csv => print_csv(&["n", "q_n", "max_length", "rate_from_prev"], &rows),
    }
}

fn cmd_distortion(map_path: &Path, mode: Mode, trials: usize, format: Format) -> Result<()> {
    let (map, _) = load_map(map_path)?;
    let mode = match mode {
        Mode::Smooth => ResidualMode::Smooth,
        Mode::Break => ResidualMode::Break,
    };
    let report = distortion_residuals(map.as_ref(), mode, trials)?;
    match format {
        Format::Json => print_json(&serde_json::to_value(&report)?),
        Format::Csv => print_csv(
            &["mode", "slope", "intercept", "r2", "n_samples", "exact_family"],
            &[vec![
                report.mode.clone(),
                num(report.slope),
                num(report.intercept),
                num(report.r2),
                report.n_samples.to_string(),
                report.exact_family.to_string(),
            ]],
        ),
    }
}

fn cmd_conjugacy(config_path: &Path, graph_out: Option<&Path>) -> Result<()> {
    let config = load_config(config_path)?;
    let (pair, approx) = prepared_table(&config)?;
    let mut value = json!({
        "table_size": approx.count(),
        "max_gap_x": approx.max_gap_x().to_f64(),
        "max_gap_t": approx.max_gap_t().to_f64(),
        "equivariance_residual": approx.built_residual().to_f64(),
        "pairing": pair.pairing,
    });
    if let Some(psi) = &pair.psi {
        value["oracle_defect"] = json!(smooth_oracle_compare(&approx, psi).to_f64());
    }
    if let Some(out) = graph_out {
        let prec = approx.base().0.prec();
        let mut writer = csv::Writer::from_path(out)?;
        writer.write_record(["x", "h_x"])?;
        for j in 0..CONJUGACY_GRAPH_SAMPLES {
            let x = j as f64 / CONJUGACY_GRAPH_SAMPLES as f64;
            let h = eval_h(&approx, &CirclePoint::from_f64(x, prec));
            writer.write_record([num(x), num(h.to_f64())])?;
        }
        writer.flush()?;
        value["graph"] = json!(out.display().to_string());
    }
    print_json(&value)
}

fn cmd_singularity(config_path: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let (_, approx) = prepared_table(&config)?;
    let prec = approx.base().0.prec();
    let report = singularity_report(&approx, &config.k_range, &Scalar::from_f64(config.delta, prec))?;
    print_json(&serde_json::to_value(&report)?)
}

fn cmd_cover(config_path: &Path, level: Option<usize>) -> Result<()> {
    let config = load_config(config_path)?;
    let levels = match level {
        Some(n) => vec![n],
        None => config.cover_levels.clone(),
    };
    if levels.is_empty() {
        return Err(LabError::InvalidConfig(
            "no cover levels configured; pass --level or set cover_levels".into(),
        ));
    }
    let (pair, approx) = prepared_table(&config)?;
    let prec = Precision::new(config.precision_bits)?;
    let oracle = match &pair.psi {
        Some(psi) => ConjugacyOracle::with_exact(&approx, psi),
        None => ConjugacyOracle::from_table(&approx),
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
    for n in levels {
        let cover = regular_cover(
            pair.map1.as_ref(),
            pair.map2.as_ref(),
            &oracle,
            n,
            &pair.x0,
            &constants,
        )?;
        let gap = distortion_gap_experiment(pair.map1.as_ref(), pair.map2.as_ref(), &cover)?;
        let mut row = cover.to_json();
        row["gap"] = json!({
            "gap": gap.gap.to_f64(),
            "bound": gap.bound.to_f64(),
            "dist1": gap.dist1.to_f64(),
            "dist2": gap.dist2.to_f64(),
        });
        rows.push(row);
    }
    print_json(&json!({ "levels": rows }))
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Rho { map, budget, format } => cmd_rho(&map, budget, format).map(|()| 0),
        Command::Cf {
            map,
            value,
            x0,
            depth,
            budget,
            format,
        } => cmd_cf(map.as_deref(), value, x0, depth, budget, format).map(|()| 0),
        Command::Partition { input, level, format } => {
            cmd_partition(&input, level, format).map(|()| 0)
        }
        Command::Denjoy {
            input,
            level,
            samples,
            format,
        } => cmd_denjoy(&input, level, samples, format).map(|()| 0),
        Command::Decay { input, n_max, format } => cmd_decay(&input, n_max, format).map(|()| 0),
        Command::Distortion {
            map,
            mode,
            trials,
            format,
        } => cmd_distortion(&map, mode, trials, format).map(|()| 0),
        Command::Conjugacy { config, graph_out } => {
            cmd_conjugacy(&config, graph_out.as_deref()).map(|()| 0)
        }
        Command::Singularity { config } => cmd_singularity(&config).map(|()| 0),
        Command::Cover { config, level } => cmd_cover(&config, level).map(|()| 0),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
