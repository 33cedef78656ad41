//! Fluid-limit dynamics.
//!
//! The limit measure evolves as
//!
//! ```text
//! d/dt <g, mu(t)> = -<g' w, mu(t)> / <w, mu(t)> + alpha <g, nu>
//! ```
//!
//! which is transport of mass along `dx/dt = -w(x) / <w, mu(t)>` plus a source
//! `alpha * nu`. [`solve_direct`] integrates the characteristics with RK4,
//! re-evaluating the mean-field denominator at every stage. [`picard_iterate`]
//! builds the same solution window by window as the fixed point of the map that
//! freezes the denominator at the previous iterate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{path_distance, Atom, AtomicMeasure, MeasureError};
use crate::model::{quantile_atoms, SystemParameters, TestFunction, WeightFunction};

pub use crate::measure::FluidPath;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("<w, mu> = {value} fell below the floor {floor} at t = {time}")]
    FloorViolation { time: f64, value: f64, floor: f64 },
    #[error("invalid fluid config: {0}")]
    BadConfig(String),
    #[error("Picard iteration did not converge on the window starting at t = {window_start}")]
    NonConvergence {
        window_start: f64,
        diagnostics: Box<PicardDiagnostics>,
    },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// How atoms move during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    Characteristics,
    /// Velocity forced to zero; only the source acts. For mass-accounting checks.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    /// Grid step.
    pub dt: f64,
    /// Atoms in the quadrature of the service law injected every step.
    pub quadrature: usize,
    /// Atoms at or below this location are dropped.
    pub prune: f64,
    /// Lower bound required of `<w, mu>`.
    pub floor: f64,
    pub horizon: f64,
    #[serde(skip)]
    pub transport: Transport,
}

impl FluidConfig {
    /// Config with the default floor `1e-3 * <w, theta>` and prune threshold.
    pub fn new(
        dt: f64,
        quadrature: usize,
        horizon: f64,
        theta: &AtomicMeasure,
        w: &WeightFunction,
    ) -> Self {
        FluidConfig {
            dt,
            quadrature,
            prune: 1e-9,
            floor: default_floor(theta, w),
            horizon,
            transport: Transport::Characteristics,
        }
    }

    pub fn validate(&self) -> Result<(), FluidError> {
        let bad = |m: String| Err(FluidError::BadConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.quadrature == 0 {
            return bad("quadrature size must be at least 1".into());
        }
        if !(self.floor > 0.0) {
            return bad(format!("floor must be positive, got {}", self.floor));
        }
        if !(self.prune >= 0.0) {
            return bad(format!(
                "prune threshold must be nonnegative, got {}",
                self.prune
            ));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be nonnegative, got {}", self.horizon));
        }
        self.steps().map(|_| ())
    }

    /// Grid steps covering the horizon; the horizon must be a multiple of `dt`.
    pub fn steps(&self) -> Result<usize, FluidError> {
        grid_steps(self.horizon, self.dt).ok_or_else(|| {
            FluidError::BadConfig(format!(
                "horizon {} is not a multiple of dt {}",
                self.horizon, self.dt
            ))
        })
    }
}

/// `k` with `k * dt = t`, if there is one.
pub fn grid_steps(t: f64, dt: f64) -> Option<usize> {
    let k = (t / dt).round();
    (k >= 0.0 && (k * dt - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(k as usize)
}

/// `1e-3 * <w, theta>`.
pub fn default_floor(theta: &AtomicMeasure, w: &WeightFunction) -> f64 {
    1e-3 * theta.integrate(|x| w.evaluate(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    /// Window length.
    pub window: f64,
    /// Target contraction factor in (0, 1).
    pub contraction: f64,
    pub max_iterations: usize,
    /// Stop a window once successive iterates are this close in path norm.
    pub tolerance: f64,
}

impl PicardConfig {
    /// Window `contraction * floor / (2 |w|_inf)`, the largest the contraction
    /// bound allows.
    pub fn new(contraction: f64, floor: f64, w: &WeightFunction) -> Self {
        PicardConfig {
            window: max_window(contraction, floor, w),
            contraction,
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }

    pub fn validate(&self, cfg: &FluidConfig, w: &WeightFunction) -> Result<(), FluidError> {
        let bad = |m: String| Err(FluidError::BadConfig(m));
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad(format!(
                "contraction must lie in (0, 1), got {}",
                self.contraction
            ));
        }
        let limit = max_window(self.contraction, cfg.floor, w);
        if !(self.window > 0.0) || self.window > limit * (1.0 + 1e-12) {
            return bad(format!(
                "window {} must lie in (0, {limit}] for contraction {}",
                self.window, self.contraction
            ));
        }
        if self.window < cfg.dt * (1.0 - 1e-9) {
            return bad(format!(
                "window {} is shorter than dt {}",
                self.window, cfg.dt
            ));
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive".into());
        }
        Ok(())
    }
}

/// `contraction * floor / (2 |w|_inf)`.
pub fn max_window(contraction: f64, floor: f64, w: &WeightFunction) -> f64 {
    contraction * floor / (2.0 * w.sup_bound())
}

/// Mass added in one step: `alpha * dt` spread over quadrature atoms of `nu`.
fn source_atoms(params: &SystemParameters, cfg: &FluidConfig) -> Vec<Atom> {
    let alpha = params.arrival.rate();
    if alpha <= 0.0 {
        return Vec::new();
    }
    quantile_atoms(&params.service, cfg.quadrature)
        .scale_mass(alpha * cfg.dt)
        .expect("positive mass factor")
        .atoms()
        .to_vec()
}

fn pair_w(w: &WeightFunction, xs: &[f64], masses: &[f64]) -> f64 {
    xs.iter()
        .zip(masses)
        .map(|(&x, m)| m * w.evaluate(x.max(0.0)))
        .sum()
}

/// Where the velocity denominator comes from inside a step.
enum Denominator {
    /// Recomputed from the stage-advanced atoms.
    Live,
    /// Prescribed at the step start, midpoint and end.
    Frozen([f64; 3]),
}

/// One RK4 step of the characteristics, source injection and pruning.
fn step_measure(
    mu: &AtomicMeasure,
    params: &SystemParameters,
    cfg: &FluidConfig,
    source: &[Atom],
    time: f64,
    denominator: Denominator,
) -> Result<AtomicMeasure, FluidError> {
    let w = &params.weight;
    let h = cfg.dt;
    let xs: Vec<f64> = mu.atoms().iter().map(|a| a.location).collect();
    let ms: Vec<f64> = mu.atoms().iter().map(|a| a.mass).collect();

    let moved: Vec<f64> = match cfg.transport {
        Transport::Frozen => xs,
        Transport::Characteristics if xs.is_empty() => xs,
        Transport::Characteristics => {
            let denom = |stage: usize, pos: &[f64]| -> Result<f64, FluidError> {
                let (d, offset) = match denominator {
                    Denominator::Live => (pair_w(w, pos, &ms), [0.0, 0.5, 0.5, 1.0][stage]),
                    Denominator::Frozen(d) => ([d[0], d[1], d[1], d[2]][stage], 0.0),
                };
                if !(d >= cfg.floor) {
                    return Err(FluidError::FloorViolation {
                        time: time + offset * h,
                        value: d,
                        floor: cfg.floor,
                    });
                }
                Ok(d)
            };
            let velocity = |pos: &[f64], d: f64| -> Vec<f64> {
                pos.iter().map(|&x| -w.evaluate(x.max(0.0)) / d).collect()
            };
            let k1 = velocity(&xs, denom(0, &xs)?);
            let s2: Vec<f64> = xs.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect();
            let k2 = velocity(&s2, denom(1, &s2)?);
            let s3: Vec<f64> = xs.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect();
            let k3 = velocity(&s3, denom(2, &s3)?);
            let s4: Vec<f64> = xs.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
            let k4 = velocity(&s4, denom(3, &s4)?);
            (0..xs.len())
                .map(|i| (xs[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).max(0.0))
                .collect()
        }
    };

    let mut atoms: Vec<Atom> = moved
        .into_iter()
        .zip(ms)
        .map(|(x, m)| Atom::new(x, m))
        .collect();
    atoms.extend_from_slice(source);
    Ok(AtomicMeasure::from_valid(atoms).prune(cfg.prune)?)
}

/// Advances `mu` by one grid step `cfg.dt`.
pub fn fluid_step(
    mu: &AtomicMeasure,
    params: &SystemParameters,
    cfg: &FluidConfig,
) -> Result<AtomicMeasure, FluidError> {
    cfg.validate()?;
    step_measure(
        mu,
        params,
        cfg,
        &source_atoms(params, cfg),
        0.0,
        Denominator::Live,
    )
}

/// Result of [`solve_direct_partial`]: the path as far as it got.
#[derive(Debug, Clone)]
pub struct DirectSolution {
    pub path: FluidPath,
    /// Why the solve stopped before the horizon, if it did.
    pub stopped: Option<FluidError>,
}

/// Like [`solve_direct`], but a floor violation ends the path instead of
/// discarding it. Every measure in the returned path satisfies the floor.
pub fn solve_direct_partial(
    theta: &AtomicMeasure,
    params: &SystemParameters,
    cfg: &FluidConfig,
) -> Result<DirectSolution, FluidError> {
    cfg.validate()?;
    let steps = cfg.steps()?;
    let w = &params.weight;
    let d0 = theta.integrate(|x| w.evaluate(x));
    if !(d0 >= cfg.floor) {
        return Err(FluidError::FloorViolation {
            time: 0.0,
            value: d0,
            floor: cfg.floor,
        });
    }
    let source = source_atoms(params, cfg);
    let mut measures = Vec::with_capacity(steps + 1);
    measures.push(theta.clone());
    let mut stopped = None;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let next = match step_measure(&measures[k], params, cfg, &source, t, Denominator::Live) {
            Ok(m) => m,
            Err(e @ FluidError::FloorViolation { .. }) => {
                stopped = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        let d = next.integrate(|x| w.evaluate(x));
        if !(d >= cfg.floor) {
            stopped = Some(FluidError::FloorViolation {
                time: t + cfg.dt,
                value: d,
                floor: cfg.floor,
            });
            break;
        }
        measures.push(next);
    }
    Ok(DirectSolution {
        path: FluidPath::new(0.0, cfg.dt, measures),
        stopped,
    })
}

/// Integrates the fluid dynamics from `theta` over `[0, cfg.horizon]`.
pub fn solve_direct(
    theta: &AtomicMeasure,
    params: &SystemParameters,
    cfg: &FluidConfig,
) -> Result<FluidPath, FluidError> {
    let sol = solve_direct_partial(theta, params, cfg)?;
    match sol.stopped {
        Some(e) => Err(e),
        None => Ok(sol.path),
    }
}

/// `<x, mu(t_k)>` at every grid time.
pub fn workload_series(path: &FluidPath) -> Vec<(f64, f64)> {
    path.times()
        .zip(path.measures())
        .map(|(t, m)| (t, m.workload()))
        .collect()
}

/// One application of the Picard map: transport `eta(t_0)` with the velocity
/// field `-w(x) / <w, eta(s)>` frozen at the given iterate, plus the source.
///
/// The denominator at a step midpoint is the mean of its grid neighbours.
pub fn picard_apply(
    eta: &FluidPath,
    params: &SystemParameters,
    cfg: &FluidConfig,
) -> Result<FluidPath, FluidError> {
    let cfg = FluidConfig {
        dt: eta.step(),
        ..cfg.clone()
    };
    let w = &params.weight;
    let denoms: Vec<f64> = eta
        .measures()
        .iter()
        .map(|m| m.integrate(|x| w.evaluate(x)))
        .collect();
    if let Some((k, &d)) = denoms.iter().enumerate().find(|(_, &d)| !(d >= cfg.floor)) {
        return Err(FluidError::FloorViolation {
            time: eta.time(k),
            value: d,
            floor: cfg.floor,
        });
    }
    let source = if eta.steps() > 0 {
        source_atoms(params, &cfg)
    } else {
        Vec::new()
    };
    // eta(t_{k+1}) holds the batch injected at the end of step k, which the
    // transport of step k never sees
    let source_w: f64 = source.iter().map(|a| a.mass * w.evaluate(a.location)).sum();
    let mut out = Vec::with_capacity(eta.len());
    out.push(eta.first().clone());
    for k in 0..eta.steps() {
        let end = (denoms[k + 1] - source_w).max(cfg.floor);
        let frozen = [denoms[k], 0.5 * (denoms[k] + end), end];
        let next = step_measure(
            &out[k],
            params,
            &cfg,
            &source,
            eta.time(k),
            Denominator::Frozen(frozen),
        )?;
        out.push(next);
    }
    Ok(FluidPath::new(eta.start(), eta.step(), out))
}

/// Convergence record of one Picard window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDiagnostics {
    pub start: f64,
    pub steps: usize,
    pub iterations: usize,
    /// `|T eta_n - eta_n|_c` per iteration.
    pub distances: Vec<f64>,
    /// `distances[n] / distances[n - 1]`.
    pub ratios: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PicardDiagnostics {
    pub window: f64,
    pub windows: Vec<WindowDiagnostics>,
}

impl PicardDiagnostics {
    pub fn total_iterations(&self) -> usize {
        self.windows.iter().map(|w| w.iterations).sum()
    }

    /// Largest successive-distance ratio over all windows.
    pub fn max_ratio(&self) -> Option<f64> {
        self.windows
            .iter()
            .flat_map(|w| w.ratios.iter().copied())
            .reduce(f64::max)
    }
}

/// Builds the fluid path as the fixed point of [`picard_apply`], window by
/// window, starting every window from the constant path at its initial measure.
pub fn picard_iterate(
    theta: &AtomicMeasure,
    params: &SystemParameters,
    cfg: &FluidConfig,
    pcfg: &PicardConfig,
) -> Result<(FluidPath, PicardDiagnostics), FluidError> {
    cfg.validate()?;
    pcfg.validate(cfg, &params.weight)?;
    let total = cfg.steps()?;
    let per_window = ((pcfg.window / cfg.dt) * (1.0 + 1e-9)).floor().max(1.0) as usize;
    let mut diagnostics = PicardDiagnostics {
        window: pcfg.window,
        windows: Vec::new(),
    };
    let mut measures = vec![theta.clone()];
    let mut k0 = 0;
    loop {
        let n = per_window.min(total - k0);
        let start = k0 as f64 * cfg.dt;
        let mut eta = FluidPath::constant(start, cfg.dt, n, &measures[k0]);
        let mut record = WindowDiagnostics {
            start,
            steps: n,
            iterations: 0,
            distances: Vec::new(),
            ratios: Vec::new(),
            converged: false,
        };
        while record.iterations < pcfg.max_iterations {
            let next = picard_apply(&eta, params, cfg)?;
            let d = path_distance(&next, &eta)?;
            if let Some(&prev) = record.distances.last() {
                record.ratios.push(if prev > 0.0 { d / prev } else { 0.0 });
            }
            record.distances.push(d);
            record.iterations += 1;
            eta = next;
            if d < pcfg.tolerance {
                record.converged = true;
                break;
            }
        }
        let converged = record.converged;
        diagnostics.windows.push(record);
        if !converged {
            return Err(FluidError::NonConvergence {
                window_start: start,
                diagnostics: Box::new(diagnostics),
            });
        }
        measures.extend(eta.into_measures().into_iter().skip(1));
        k0 += n;
        if k0 >= total {
            break;
        }
    }
    Ok((FluidPath::new(0.0, cfg.dt, measures), diagnostics))
}

/// Integral-form residual of one test function along a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelResidual {
    pub name: String,
    /// Supremum over grid times.
    pub residual: f64,
    /// Grid time attaining the supremum.
    pub at_time: f64,
}

impl PanelResidual {
    pub fn exceeds(&self, tolerance: f64) -> bool {
        self.residual > tolerance
    }
}

/// For each test function `g`, the largest deviation over grid times of
///
/// ```text
/// <g, mu(t)> - <g, mu(0)> + int_0^t <g' w, mu(s)> / <w, mu(s)> ds - alpha t <g, nu>
/// ```
///
/// from zero, with the time integral by the trapezoid rule on the path grid.
pub fn picard_residual(
    path: &FluidPath,
    params: &SystemParameters,
    panel: &[TestFunction],
) -> Result<Vec<PanelResidual>, FluidError> {
    let w = &params.weight;
    let denoms: Vec<f64> = path
        .measures()
        .iter()
        .map(|m| m.integrate(|x| w.evaluate(x)))
        .collect();
    if let Some((k, &d)) = denoms.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(FluidError::FloorViolation {
            time: path.time(k),
            value: d,
            floor: 0.0,
        });
    }
    let alpha = params.arrival.rate();
    Ok(panel
        .par_iter()
        .map(|g| {
            let source = alpha * params.service.expectation(|x| g.value(x));
            let g0 = path.first().integrate(|x| g.value(x));
            let drift: Vec<f64> = path
                .measures()
                .iter()
                .zip(&denoms)
                .map(|(m, d)| m.integrate(|x| g.derivative(x) * w.evaluate(x)) / d)
                .collect();
            let mut best = PanelResidual {
                name: g.name().to_string(),
                residual: 0.0,
                at_time: path.start(),
            };
            let mut integral = 0.0;
            for (k, m) in path.measures().iter().enumerate() {
                if k > 0 {
                    integral += 0.5 * path.step() * (drift[k - 1] + drift[k]);
                }
                let elapsed = k as f64 * path.step();
                let r = (m.integrate(|x| g.value(x)) - g0 + integral - source * elapsed).abs();
                if r > best.residual {
                    best.residual = r;
                    best.at_time = path.time(k);
                }
            }
            best
        })
        .collect())
}
