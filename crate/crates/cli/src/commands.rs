use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use wps_core::fluid::DirectSolution;
use wps_core::io::{self as wio, IoError};
use wps_core::{
    bl_distance, picard_iterate, picard_residual, run, run_scaling, solve_direct_partial,
    workload_series, FluidError, HarnessError, SimError, TestFunction,
};

use crate::config::{to_toml, ConfigErrors, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Simulate,
    Fluid,
    Picard,
    ScalingTest,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Fluid => "fluid",
            Subcommand::Picard => "picard",
            Subcommand::ScalingTest => "scaling-test",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    #[error("{message}")]
    Usage { message: String },
    #[error("{message}")]
    Numerical {
        message: String,
        details: serde_json::Value,
    },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 1 for configuration and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical { .. } => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config(errs) => json!({
                "exit_code": 1,
                "kind": "config",
                "message": errs.to_string(),
                "errors": errs.0,
            }),
            CliError::Usage { message } => json!({
                "exit_code": 1,
                "kind": "usage",
                "message": message,
            }),
            CliError::Io(message) => json!({
                "exit_code": 1,
                "kind": "io",
                "message": message,
            }),
            CliError::Numerical { message, details } => json!({
                "exit_code": 2,
                "kind": "numerical",
                "message": message,
                "details": details,
            }),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage {
        message: message.into(),
    }
}

impl From<FluidError> for CliError {
    fn from(e: FluidError) -> Self {
        let details = match &e {
            FluidError::FloorViolation { time, value, floor } => json!({
                "error": "floor_violation",
                "time": time,
                "value": value,
                "floor": floor,
            }),
            FluidError::NonConvergence {
                window_start,
                diagnostics,
            } => json!({
                "error": "non_convergence",
                "window_start": window_start,
                "diagnostics": diagnostics,
            }),
            FluidError::BadConfig(_) => return usage(e.to_string()),
            FluidError::Measure(_) => json!({ "error": "measure" }),
        };
        CliError::Numerical {
            message: e.to_string(),
            details,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::BadConfig(_) | SimError::BadJob { .. } => usage(e.to_string()),
            _ => CliError::Numerical {
                message: e.to_string(),
                details: json!({ "error": "simulation" }),
            },
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Fluid(f) => f.into(),
            HarnessError::Sim(s) => s.into(),
            other => usage(other.to_string()),
        }
    }
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(target)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), IoError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Resolved config, seed and tool version; enough to rerun with `--config`.
pub fn manifest(sub: Subcommand, cfg: &RunConfig, format: Format) -> serde_json::Value {
    json!({
        "tool": "wps",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": sub.name(),
        "seed": cfg.seed(),
        "format": format,
        "config": cfg,
    })
}

fn write_manifest(
    dir: &Path,
    sub: Subcommand,
    cfg: &RunConfig,
    format: Format,
) -> Result<(), CliError> {
    write_atomic(
        dir,
        "manifest.json",
        &json_bytes(&manifest(sub, cfg, format)),
    )?;
    write_atomic(dir, "config.toml", to_toml(cfg).as_bytes())?;
    Ok(())
}

/// Runs one config-driven subcommand, writing its outputs and manifest into
/// `out`. Returns a one-line summary for the terminal.
pub fn dispatch(
    sub: Subcommand,
    cfg: &RunConfig,
    out: &Path,
    format: Format,
) -> Result<String, CliError> {
    fs::create_dir_all(out)?;
    write_manifest(out, sub, cfg, format)?;
    match sub {
        Subcommand::Simulate => simulate(cfg, out, format),
        Subcommand::Fluid => fluid(cfg, out, format),
        Subcommand::Picard => picard(cfg, out, format),
        Subcommand::ScalingTest => scaling(cfg, out, format),
    }
}

fn simulate(cfg: &RunConfig, out: &Path, format: Format) -> Result<String, CliError> {
    let trace = run(&cfg.params(), cfg.initial_jobs(), &cfg.sim_config())?;
    match format {
        Format::Csv => {
            write_atomic(
                out,
                "events.csv",
                &csv_bytes(|b| wio::write_events(b, &trace.events))?,
            )?;
            write_atomic(
                out,
                "series.csv",
                &csv_bytes(|b| wio::write_series(b, &trace.series))?,
            )?;
            write_atomic(
                out,
                "snapshots.csv",
                &csv_bytes(|b| wio::write_snapshots(b, &trace.snapshots))?,
            )?;
        }
        Format::Json => {
            write_atomic(out, "trace.json", &json_bytes(&trace))?;
        }
    }
    Ok(format!(
        "simulated {} events over [0, {}]",
        trace.events.len(),
        trace.horizon
    ))
}

fn write_path_outputs(
    out: &Path,
    format: Format,
    path: &wps_core::FluidPath,
) -> Result<(), CliError> {
    let series = workload_series(path);
    match format {
        Format::Csv => {
            write_atomic(out, "path.csv", &csv_bytes(|b| wio::write_path(b, path))?)?;
            write_atomic(
                out,
                "workload.csv",
                &csv_bytes(|b| wio::write_workload(b, &series))?,
            )?;
        }
        Format::Json => {
            write_atomic(out, "path.json", &json_bytes(path))?;
            write_atomic(out, "workload.json", &json_bytes(&series))?;
        }
    }
    Ok(())
}

fn fluid(cfg: &RunConfig, out: &Path, format: Format) -> Result<String, CliError> {
    let params = cfg.params();
    let DirectSolution { path, stopped } =
        solve_direct_partial(&cfg.theta(), &params, &cfg.fluid_config())?;
    write_path_outputs(out, format, &path)?;
    let residuals = picard_residual(&path, &params, &TestFunction::panel())?;
    write_atomic(
        out,
        "diagnostics.json",
        &json_bytes(&json!({
            "steps": path.steps(),
            "end_time": path.end_time(),
            "floor": cfg.fluid_config().floor,
            "residuals": residuals,
            "stopped": stopped.as_ref().map(|e| e.to_string()),
        })),
    )?;
    if let Some(e) = stopped {
        return Err(e.into());
    }
    Ok(format!("fluid path with {} steps", path.steps()))
}

fn picard(cfg: &RunConfig, out: &Path, format: Format) -> Result<String, CliError> {
    let params = cfg.params();
    let (path, diagnostics) = picard_iterate(
        &cfg.theta(),
        &params,
        &cfg.fluid_config(),
        &cfg.picard_config(),
    )?;
    write_path_outputs(out, format, &path)?;
    let residuals = picard_residual(&path, &params, &TestFunction::panel())?;
    write_atomic(
        out,
        "diagnostics.json",
        &json_bytes(&json!({
            "window": diagnostics.window,
            "iterations": diagnostics.total_iterations(),
            "max_ratio": diagnostics.max_ratio(),
            "windows": diagnostics.windows,
            "residuals": residuals,
        })),
    )?;
    Ok(format!(
        "picard converged in {} iterations over {} windows",
        diagnostics.total_iterations(),
        diagnostics.windows.len()
    ))
}

fn scaling(cfg: &RunConfig, out: &Path, format: Format) -> Result<String, CliError> {
    let started = Instant::now();
    let report = run_scaling(&cfg.experiment())?;
    let runtime = started.elapsed().as_secs_f64();
    match format {
        Format::Csv => {
            write_atomic(
                out,
                "report.csv",
                &csv_bytes(|b| wio::write_report(b, &report.cells))?,
            )?;
        }
        Format::Json => {
            write_atomic(out, "report.json", &json_bytes(&report.cells))?;
        }
    }
    let failures: Vec<_> = report
        .cells
        .iter()
        .filter_map(|c| {
            c.error.as_ref().map(|e| {
                json!({ "r": c.r, "replication": c.replication, "checkpoint": c.checkpoint, "error": e })
            })
        })
        .collect();
    write_atomic(
        out,
        "summary.json",
        &json_bytes(&json!({
            "medians": report.medians,
            "verdict": if report.monotone { "nonincreasing" } else { "not_monotone" },
            "monotone": report.monotone,
            "runtime_seconds": runtime,
            "seeds": report.seeds,
            "failures": failures,
        })),
    )?;
    Ok(format!(
        "scaling test: {} cells, verdict {}",
        report.cells.len(),
        if report.monotone {
            "nonincreasing"
        } else {
            "not monotone"
        }
    ))
}

/// BL distance between two measure files. One value per shared time, or a
/// single value when both files hold a single measure.
pub fn distance(a: &Path, b: &Path) -> Result<Vec<(Option<f64>, f64)>, CliError> {
    let read = |p: &Path| -> Result<_, CliError> {
        let f = fs::File::open(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        wio::read_measures(f).map_err(|e| usage(format!("{}: {e}", p.display())))
    };
    let (ma, mb) = (read(a)?, read(b)?);
    if ma.len() == 1 && mb.len() == 1 {
        return Ok(vec![(ma[0].0, bl_distance(&ma[0].1, &mb[0].1))]);
    }
    if ma.len() != mb.len() || ma.iter().zip(&mb).any(|(x, y)| x.0 != y.0) {
        return Err(usage("measure files hold different time grids"));
    }
    Ok(ma
        .iter()
        .zip(&mb)
        .map(|((t, x), (_, y))| (*t, bl_distance(x, y)))
        .collect())
}

/// Writes `error.json` into `out`, if that directory can be created.
pub fn write_error(out: &Path, err: &CliError) {
    if fs::create_dir_all(out).is_ok() {
        let _ = write_atomic(out, "error.json", &json_bytes(&err.to_json()));
    }
}
