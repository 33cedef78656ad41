//! Heavy-traffic scaling experiments.
//!
//! For each `r` the prelimit system is started from about `r <1, theta>` jobs
//! drawn from `theta`, run over `[0, r T]`, and its scaled descriptor
//! `(1/r) mu^r(r t)` is compared at each checkpoint with the fluid path from
//! `theta`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluid::{grid_steps, solve_direct, FluidConfig, FluidError, FluidPath};
use crate::measure::{bl_distance, AtomicMeasure};
use crate::model::{ModelError, SystemParameters};
use crate::simulator::{run, Job, SimConfig, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("theta must have positive mass")]
    EmptyTheta,
    #[error("invalid experiment: {0}")]
    BadExperiment(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// How the `r`-th initial condition is realized from `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// I.i.d. requirements from normalized `theta`.
    #[default]
    Sampled,
    /// Requirements at the midpoint quantiles of normalized `theta`.
    Quantile,
}

/// Jobs present at time zero in the `r`-th system: `round(r <1, theta>)` of
/// them, with requirements drawn from `theta / <1, theta>`.
pub fn initial_jobs_from_theta(
    theta: &AtomicMeasure,
    r: u64,
    seed: u64,
) -> Result<Vec<Job>, HarnessError> {
    initial_jobs(theta, r, seed, InitMode::Sampled)
}

pub fn initial_jobs(
    theta: &AtomicMeasure,
    r: u64,
    seed: u64,
    mode: InitMode,
) -> Result<Vec<Job>, HarnessError> {
    let mass = theta.total_mass();
    if theta.is_empty() || !(mass > 0.0) {
        return Err(HarnessError::EmptyTheta);
    }
    if r == 0 {
        return Err(HarnessError::BadExperiment("r must be at least 1".into()));
    }
    let n = (r as f64 * mass).round() as usize;
    let atoms = theta.atoms();
    let locations: Vec<f64> = match mode {
        InitMode::Sampled => {
            let index = WeightedIndex::new(atoms.iter().map(|a| a.mass))
                .map_err(|e| HarnessError::BadExperiment(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            (0..n)
                .map(|_| atoms[index.sample(&mut rng)].location)
                .collect()
        }
        InitMode::Quantile => {
            let mut cumulative = Vec::with_capacity(atoms.len());
            let mut acc = 0.0;
            for a in atoms {
                acc += a.mass / mass;
                cumulative.push(acc);
            }
            (0..n)
                .map(|j| {
                    let p = (j as f64 + 0.5) / n as f64;
                    let i = cumulative.partition_point(|&c| c < p).min(atoms.len() - 1);
                    atoms[i].location
                })
                .collect()
        }
    };
    Ok(locations
        .into_iter()
        .enumerate()
        .map(|(i, x)| Job::initial(i as u64, x))
        .collect())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replication `replication` at scale `r`.
pub fn seed_for(master: u64, r: u64, replication: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ r) ^ replication)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingExperiment {
    pub r_values: Vec<u64>,
    pub replications: usize,
    pub seed: u64,
    pub checkpoints: Vec<f64>,
    pub params: SystemParameters,
    pub theta: AtomicMeasure,
    /// Fluid solver settings; the horizon is replaced by the last checkpoint.
    pub fluid: FluidConfig,
    /// Integrator settings for the prelimit runs; horizon, seed and snapshot
    /// times are set per run.
    pub sim: SimConfig,
    pub init_mode: InitMode,
    /// Run the `r`-th system at arrival rate `alpha (1 - c / r)`. Zero is off.
    pub perturbation: f64,
    /// Permit traffic intensity away from one.
    pub allow_off_critical: bool,
}

impl ScalingExperiment {
    pub fn new(
        r_values: Vec<u64>,
        replications: usize,
        seed: u64,
        checkpoints: Vec<f64>,
        params: SystemParameters,
        theta: AtomicMeasure,
        fluid: FluidConfig,
    ) -> Self {
        ScalingExperiment {
            r_values,
            replications,
            seed,
            checkpoints,
            params,
            theta,
            fluid,
            sim: SimConfig::default(),
            init_mode: InitMode::Sampled,
            perturbation: 0.0,
            allow_off_critical: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::BadExperiment(m));
        if self.r_values.is_empty() {
            return bad("no r values".into());
        }
        if self.r_values[0] == 0 || self.r_values.windows(2).any(|p| p[0] >= p[1]) {
            return bad("r values must be positive and strictly increasing".into());
        }
        if self.replications == 0 {
            return bad("need at least one replication".into());
        }
        if self.checkpoints.is_empty() {
            return bad("no checkpoints".into());
        }
        if self
            .checkpoints
            .iter()
            .any(|t| !(*t >= 0.0 && t.is_finite()))
        {
            return bad("checkpoints must be finite and nonnegative".into());
        }
        if let Some(t) = self
            .checkpoints
            .iter()
            .find(|&&t| grid_steps(t, self.fluid.dt).is_none())
        {
            return bad(format!(
                "fluid dt {} does not divide checkpoint {t}",
                self.fluid.dt
            ));
        }
        if !self.perturbation.is_finite()
            || self.perturbation < 0.0
            || self.perturbation >= self.r_values[0] as f64
        {
            return bad(format!(
                "perturbation {} must lie in [0, min r)",
                self.perturbation
            ));
        }
        if self.theta.is_empty() {
            return Err(HarnessError::EmptyTheta);
        }
        if !self.allow_off_critical {
            self.params.check_heavy_traffic()?;
        }
        Ok(())
    }

    fn max_checkpoint(&self) -> f64 {
        self.checkpoints.iter().copied().fold(0.0, f64::max)
    }

    fn params_at(&self, r: u64) -> Result<SystemParameters, HarnessError> {
        if self.perturbation == 0.0 {
            return Ok(self.params);
        }
        let rate = self.params.arrival.rate() * (1.0 - self.perturbation / r as f64);
        Ok(SystemParameters {
            arrival: self.params.arrival.with_rate(rate)?,
            ..self.params
        })
    }
}

/// One `(r, replication, checkpoint)` comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub r: u64,
    pub replication: usize,
    pub checkpoint: f64,
    pub bl_distance: f64,
    /// `|<x, mu^r> - <x, mu>|` for the scaled and fluid measures.
    pub workload_abs_err: f64,
    /// `|Z^r(r t) / r - <1, mu(t)>|`.
    pub z_abs_err: f64,
    pub error: Option<String>,
}

impl Cell {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

/// Medians over completed replications at one `(r, checkpoint)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub r: u64,
    pub checkpoint: f64,
    pub completed: usize,
    pub bl_distance: f64,
    pub workload_abs_err: f64,
    pub z_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub r: u64,
    pub replication: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Sorted by `(r, replication, checkpoint index)`.
    pub cells: Vec<Cell>,
    /// Sorted by `(r, checkpoint index)`.
    pub medians: Vec<MedianRow>,
    /// Median distance nonincreasing in `r` at every checkpoint.
    pub monotone: bool,
    pub seeds: Vec<SeedRecord>,
}

impl ConvergenceReport {
    /// Median distances at `checkpoint`, in increasing `r`.
    pub fn median_distances(&self, checkpoint: f64) -> Vec<(u64, f64)> {
        self.medians
            .iter()
            .filter(|m| m.checkpoint == checkpoint)
            .map(|m| (m.r, m.bl_distance))
            .collect()
    }
}

/// Median of a nonempty sample, averaging the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn replicate(
    exp: &ScalingExperiment,
    fluid: &FluidPath,
    r: u64,
    replication: usize,
    seed: u64,
) -> Vec<Cell> {
    let cell = |checkpoint: f64, result: Result<(f64, f64, f64), HarnessError>| match result {
        Ok((d, wl, z)) => Cell {
            r,
            replication,
            checkpoint,
            bl_distance: d,
            workload_abs_err: wl,
            z_abs_err: z,
            error: None,
        },
        Err(e) => Cell {
            r,
            replication,
            checkpoint,
            bl_distance: f64::NAN,
            workload_abs_err: f64::NAN,
            z_abs_err: f64::NAN,
            error: Some(e.to_string()),
        },
    };
    let compare = |scaled: &AtomicMeasure, t: f64| -> (f64, f64, f64) {
        let k = fluid.index_of(t).expect("checkpoint on the fluid grid");
        let target = fluid.measure(k);
        (
            bl_distance(scaled, target),
            (scaled.workload() - target.workload()).abs(),
            (scaled.total_mass() - target.total_mass()).abs(),
        )
    };
    let rf = r as f64;

    let outcome = (|| -> Result<Vec<(f64, f64, f64)>, HarnessError> {
        let jobs = initial_jobs(&exp.theta, r, seed, exp.init_mode)?;
        if exp.max_checkpoint() == 0.0 {
            let scaled = AtomicMeasure::from_pairs(
                &jobs
                    .iter()
                    .map(|j| (j.remaining, 1.0 / rf))
                    .collect::<Vec<_>>(),
            )
            .map_err(|e| HarnessError::BadExperiment(e.to_string()))?;
            return Ok(exp
                .checkpoints
                .iter()
                .map(|&t| compare(&scaled, t))
                .collect());
        }
        let cfg = SimConfig {
            horizon: rf * exp.max_checkpoint(),
            seed,
            snapshot_times: exp.checkpoints.iter().map(|t| rf * t).collect(),
            ..exp.sim.clone()
        };
        let trace = run(&exp.params_at(r)?, jobs, &cfg)?;
        exp.checkpoints
            .iter()
            .map(|&t| Ok(compare(&trace.scaled_snapshot(rf, t)?, t)))
            .collect()
    })();

    match outcome {
        Ok(values) => exp
            .checkpoints
            .iter()
            .zip(values)
            .map(|(&t, v)| cell(t, Ok(v)))
            .collect(),
        Err(e) => exp
            .checkpoints
            .iter()
            .map(|&t| cell(t, Err(e.clone())))
            .collect(),
    }
}

/// Runs every replication (in parallel) and compares against the fluid path.
/// Failed replications are recorded in their cells; the report is identical
/// for any thread count.
pub fn run_scaling(exp: &ScalingExperiment) -> Result<ConvergenceReport, HarnessError> {
    exp.validate()?;
    let fluid_cfg = FluidConfig {
        horizon: exp.max_checkpoint(),
        ..exp.fluid.clone()
    };
    let fluid = solve_direct(&exp.theta, &exp.params, &fluid_cfg)?;

    let tasks: Vec<SeedRecord> = exp
        .r_values
        .iter()
        .flat_map(|&r| {
            (0..exp.replications).map(move |i| SeedRecord {
                r,
                replication: i,
                seed: seed_for(exp.seed, r, i as u64),
            })
        })
        .collect();
    let cells: Vec<Cell> = tasks
        .par_iter()
        .map(|t| replicate(exp, &fluid, t.r, t.replication, t.seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut medians = Vec::new();
    for &r in &exp.r_values {
        for &t in &exp.checkpoints {
            let done: Vec<&Cell> = cells
                .iter()
                .filter(|c| c.r == r && c.checkpoint == t && c.completed())
                .collect();
            let pick = |f: fn(&Cell) -> f64| median(&done.iter().map(|c| f(c)).collect::<Vec<_>>());
            medians.push(MedianRow {
                r,
                checkpoint: t,
                completed: done.len(),
                bl_distance: pick(|c| c.bl_distance),
                workload_abs_err: pick(|c| c.workload_abs_err),
                z_abs_err: pick(|c| c.z_abs_err),
            });
        }
    }
    let monotone = exp.checkpoints.iter().all(|&t| {
        let row: Vec<f64> = medians
            .iter()
            .filter(|m| m.checkpoint == t)
            .map(|m| m.bl_distance)
            .collect();
        row.windows(2).all(|p| p[1] <= p[0])
    });
    Ok(ConvergenceReport {
        cells,
        medians,
        monotone,
        seeds: tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArrivalModel, Distribution, WeightFunction};
    use std::collections::HashSet;

    fn theta2() -> AtomicMeasure {
        AtomicMeasure::from_pairs(&[(1.0, 0.5), (3.0, 0.5)]).unwrap()
    }

    #[test]
    fn degenerate_theta_gives_identical_jobs() {
        let theta = AtomicMeasure::dirac(1.0, 1.0).unwrap();
        let jobs = initial_jobs_from_theta(&theta, 10, 7).unwrap();
        assert_eq!(jobs.len(), 10);
        assert!(jobs.iter().all(|j| j.requirement == 1.0 && j.initial));
    }

    #[test]
    fn job_count_and_support() {
        // round(r <1, theta>) with <1, theta> = 1
        let jobs = initial_jobs_from_theta(&theta2(), 4, 3).unwrap();
        assert_eq!(jobs.len(), 4);
        assert!(jobs
            .iter()
            .all(|j| j.requirement == 1.0 || j.requirement == 3.0));
        let q = initial_jobs(&theta2(), 4, 3, InitMode::Quantile).unwrap();
        let req: Vec<f64> = q.iter().map(|j| j.requirement).collect();
        assert_eq!(req, vec![1.0, 1.0, 3.0, 3.0]);
        let half = theta2().scale_mass(0.5).unwrap();
        assert_eq!(initial_jobs_from_theta(&half, 4, 3).unwrap().len(), 2);
    }

    #[test]
    fn empty_theta_rejected() {
        assert_eq!(
            initial_jobs_from_theta(&AtomicMeasure::empty(), 5, 0),
            Err(HarnessError::EmptyTheta)
        );
    }

    #[test]
    fn empirical_measure_approaches_theta() {
        let theta = AtomicMeasure::from_pairs(&[(0.5, 0.3), (1.0, 0.5), (2.5, 0.2)]).unwrap();
        let dist = |r: u64| -> f64 {
            let d: Vec<f64> = (0..50)
                .map(|s| {
                    let jobs = initial_jobs_from_theta(&theta, r, seed_for(11, r, s)).unwrap();
                    let pairs: Vec<(f64, f64)> = jobs
                        .iter()
                        .map(|j| (j.requirement, 1.0 / r as f64))
                        .collect();
                    bl_distance(&AtomicMeasure::from_pairs(&pairs).unwrap(), &theta)
                })
                .collect();
            median(&d)
        };
        assert!(dist(1000) <= dist(10));
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        assert_eq!(seed_for(5, 20, 3), seed_for(5, 20, 3));
        let grid: Vec<(u64, u64)> = (1..=3).flat_map(|r| (0..20).map(move |i| (r, i))).collect();
        let a: HashSet<u64> = grid.iter().map(|&(r, i)| seed_for(5, r, i)).collect();
        assert_eq!(a.len(), 60);
        for &(r, i) in &grid {
            assert_ne!(seed_for(5, r, i), seed_for(6, r, i));
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn mm_params() -> SystemParameters {
        SystemParameters::new(
            ArrivalModel::poisson(1.0).unwrap(),
            Distribution::Exponential { mean: 1.0 },
            WeightFunction::ExpSaturation { rate: 1.0 },
        )
        .unwrap()
    }

    fn experiment(r_values: Vec<u64>, checkpoints: Vec<f64>) -> ScalingExperiment {
        let theta = AtomicMeasure::from_pairs(&[(0.5, 0.5), (2.0, 0.5)]).unwrap();
        let w = WeightFunction::ExpSaturation { rate: 1.0 };
        let fluid = FluidConfig::new(0.01, 50, 1.0, &theta, &w);
        ScalingExperiment::new(r_values, 1, 9, checkpoints, mm_params(), theta, fluid)
    }

    #[test]
    fn checkpoint_zero_matches_initial_distance() {
        let exp = experiment(vec![1], vec![0.0]);
        let report = run_scaling(&exp).unwrap();
        let jobs = initial_jobs_from_theta(&exp.theta, 1, seed_for(9, 1, 0)).unwrap();
        let pairs: Vec<(f64, f64)> = jobs.iter().map(|j| (j.requirement, 1.0)).collect();
        let expect = bl_distance(&AtomicMeasure::from_pairs(&pairs).unwrap(), &exp.theta);
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cells[0].bl_distance, expect);
    }

    #[test]
    fn experiment_validation() {
        let mut exp = experiment(vec![5, 5], vec![1.0]);
        assert!(run_scaling(&exp).is_err());
        exp.r_values = vec![5, 20];
        exp.checkpoints = vec![0.015];
        assert!(matches!(
            run_scaling(&exp),
            Err(HarnessError::BadExperiment(_))
        ));
        exp.checkpoints = vec![0.5];
        exp.params.arrival = ArrivalModel::poisson(0.5).unwrap();
        assert!(matches!(run_scaling(&exp), Err(HarnessError::Model(_))));
        exp.allow_off_critical = true;
        assert!(run_scaling(&exp).is_ok());
    }

    #[test]
    fn report_independent_of_thread_count() {
        let mut exp = experiment(vec![2, 4], vec![0.5, 1.0]);
        exp.replications = 3;
        let a = run_scaling(&exp).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| run_scaling(&exp).unwrap());
        assert_eq!(a, b);
        assert!(a
            .cells
            .iter()
            .all(|c| c.completed() && c.bl_distance >= 0.0));
        assert_eq!(a.medians.len(), 4);
        assert!(a.medians.iter().all(|m| m.completed == 3));
    }

    #[test]
    fn perturbed_rate_is_validated() {
        let mut exp = experiment(vec![2, 4], vec![0.5]);
        exp.perturbation = 3.0;
        assert!(run_scaling(&exp).is_err());
        exp.perturbation = 1.0;
        assert!(run_scaling(&exp).is_ok());
    }
}
