//! Discrete-event simulation of the prelimit queue.
//!
//! Between arrivals every job's remaining work follows
//! `dR_i/dt = -w(R_i) / sum_k w(R_k)`, integrated with classical RK4 under
//! step-doubling error control. Since `w(0) = 0`, remaining work only decays
//! towards zero when several jobs share the server, so a job departs when its
//! remaining work reaches `depart_threshold`; the crossing time is located by
//! bisection on the sub-step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Atom, AtomicMeasure};
use crate::model::{SystemParameters, WeightFunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("invalid initial job {id}: {reason}")]
    BadJob { id: u64, reason: String },
    #[error("every job has zero weight at t = {time}")]
    Degenerate { time: f64 },
    #[error("integrator tolerance not met with step {step} at t = {time}")]
    StepFailure { time: f64, step: f64 },
    #[error("time {time} lies beyond the simulated horizon {horizon}")]
    BeyondHorizon { time: f64, horizon: f64 },
    #[error("no snapshot was recorded at clock time {0}")]
    NoSnapshot(f64),
}

/// One job in the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub arrival_time: f64,
    /// Service requirement.
    pub requirement: f64,
    /// Service received so far.
    pub attained: f64,
    pub remaining: f64,
    /// Present at time zero rather than arriving.
    pub initial: bool,
}

impl Job {
    /// A fresh job that has received no service.
    pub fn new(id: u64, arrival_time: f64, requirement: f64) -> Self {
        Job {
            id,
            arrival_time,
            requirement,
            attained: 0.0,
            remaining: requirement,
            initial: false,
        }
    }

    /// A job present at time zero.
    pub fn initial(id: u64, requirement: f64) -> Self {
        Job {
            initial: true,
            ..Job::new(id, 0.0, requirement)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub depart_threshold: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub snapshot_times: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 1.0,
            depart_threshold: 1e-9,
            max_step: 1.0,
            min_step: 1e-12,
            tolerance: 1e-10,
            seed: 0,
            snapshot_times: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadConfig(m));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.depart_threshold > 0.0) {
            return bad(format!(
                "depart_threshold must be positive, got {}",
                self.depart_threshold
            ));
        }
        if !(self.max_step > 0.0) || !(self.min_step > 0.0) || self.min_step > self.max_step {
            return bad("need 0 < min_step <= max_step".into());
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive".into());
        }
        if let Some(t) = self
            .snapshot_times
            .iter()
            .find(|t| !(**t >= 0.0 && **t <= self.horizon))
        {
            return bad(format!("snapshot time {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Arrival,
    Departure,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::Departure => "departure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub job_id: u64,
    pub requirement: f64,
}

/// Number in system and total remaining work at one instant. Events produce a
/// point just before and just after the state jump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub time: f64,
    pub jobs: usize,
    pub workload: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    /// Unit atom at each remaining work.
    pub measure: AtomicMeasure,
    /// `E(t)`.
    pub arrivals: u64,
    /// `D(t)`.
    pub departures: u64,
    /// `Z(t)`.
    pub jobs: usize,
    pub workload: f64,
    /// Total requirement of jobs arrived in `(0, t]`.
    pub arrived_work: f64,
    /// Time in `[0, t]` with at least one job present.
    pub busy_time: f64,
    /// Remaining work (each at most the threshold) dropped at departures.
    pub discarded_work: f64,
}

/// Everything recorded by [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub horizon: f64,
    pub initial_jobs: usize,
    pub initial_workload: f64,
    pub events: Vec<Event>,
    pub series: Vec<SeriesPoint>,
    pub snapshots: Vec<Snapshot>,
}

impl Trace {
    /// Snapshot recorded at clock time `time`.
    pub fn snapshot_at(&self, time: f64) -> Result<&Snapshot, SimError> {
        if time > self.horizon * (1.0 + 1e-12) {
            return Err(SimError::BeyondHorizon {
                time,
                horizon: self.horizon,
            });
        }
        self.snapshots
            .iter()
            .find(|s| (s.time - time).abs() <= 1e-9 * time.abs().max(1.0))
            .ok_or(SimError::NoSnapshot(time))
    }

    /// `(1/r) mu^r(r t)`.
    pub fn scaled_snapshot(&self, r: f64, t: f64) -> Result<AtomicMeasure, SimError> {
        let snap = self.snapshot_at(r * t)?;
        Ok(snap.measure.scale_mass(1.0 / r).expect("r is positive"))
    }

    /// `E(r t) / r`.
    pub fn scaled_arrivals(&self, r: f64, t: f64) -> Result<f64, SimError> {
        Ok(self.snapshot_at(r * t)?.arrivals as f64 / r)
    }

    /// `Z(r t) / r`.
    pub fn scaled_jobs(&self, r: f64, t: f64) -> Result<f64, SimError> {
        Ok(self.snapshot_at(r * t)?.jobs as f64 / r)
    }
}

/// Capacity shares `w(R_n) / sum_k w(R_k)`.
pub fn service_shares(jobs: &[Job], weight: &WeightFunction) -> Result<Vec<f64>, SimError> {
    let remaining: Vec<f64> = jobs.iter().map(|j| j.remaining).collect();
    shares_of(&remaining, weight).ok_or(SimError::Degenerate { time: f64::NAN })
}

fn shares_of(remaining: &[f64], weight: &WeightFunction) -> Option<Vec<f64>> {
    let w: Vec<f64> = remaining
        .iter()
        .map(|&r| weight.evaluate(r.max(0.0)))
        .collect();
    let total: f64 = w.iter().sum();
    (total > 0.0).then(|| w.iter().map(|x| x / total).collect())
}

/// `mu(t)`: a unit atom at each positive remaining work.
pub fn snapshot_measure(state: &SimulationState) -> AtomicMeasure {
    AtomicMeasure::from_valid(
        state
            .jobs
            .iter()
            .filter(|j| j.remaining > 0.0)
            .map(|j| Atom::new(j.remaining, 1.0))
            .collect(),
    )
}

/// Prelimit system state.
#[derive(Debug, Clone)]
pub struct SimulationState {
    params: SystemParameters,
    clock: f64,
    jobs: Vec<Job>,
    arrivals: u64,
    departures: u64,
    next_id: u64,
    next_arrival: Option<f64>,
    arrived_work: f64,
    busy_time: f64,
    discarded_work: f64,
    step_hint: f64,
    arrival_rng: ChaCha8Rng,
    service_rng: ChaCha8Rng,
}

impl SimulationState {
    /// Initial state at time zero. Initial jobs keep their ids; arrivals are
    /// numbered after the largest initial id.
    pub fn new(params: SystemParameters, init: Vec<Job>, seed: u64) -> Result<Self, SimError> {
        for j in &init {
            let ok = j.requirement > 0.0
                && j.requirement.is_finite()
                && j.remaining >= 0.0
                && j.attained >= 0.0
                && (j.attained + j.remaining - j.requirement).abs() <= 1e-12 * j.requirement;
            if !ok {
                return Err(SimError::BadJob {
                    id: j.id,
                    reason: "need requirement > 0 and attained + remaining = requirement".into(),
                });
            }
        }
        let next_id = init.iter().map(|j| j.id + 1).max().unwrap_or(0);
        let arrival_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut service_rng = ChaCha8Rng::seed_from_u64(seed);
        service_rng.set_stream(1);
        Ok(SimulationState {
            params,
            clock: 0.0,
            jobs: init,
            arrivals: 0,
            departures: 0,
            next_id,
            next_arrival: None,
            arrived_work: 0.0,
            busy_time: 0.0,
            discarded_work: 0.0,
            step_hint: f64::INFINITY,
            arrival_rng,
            service_rng,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn jobs(&self) -> &[Job] {
        &self.jobs
    }

    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }

    pub fn departures(&self) -> u64 {
        self.departures
    }

    /// `Z(t)`.
    pub fn in_system(&self) -> usize {
        self.jobs.len()
    }

    pub fn workload(&self) -> f64 {
        self.jobs.iter().map(|j| j.remaining).sum()
    }

    fn series_point(&self) -> SeriesPoint {
        SeriesPoint {
            time: self.clock,
            jobs: self.jobs.len(),
            workload: self.workload(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            time: self.clock,
            measure: snapshot_measure(self),
            arrivals: self.arrivals,
            departures: self.departures,
            jobs: self.jobs.len(),
            workload: self.workload(),
            arrived_work: self.arrived_work,
            busy_time: self.busy_time,
            discarded_work: self.discarded_work,
        }
    }

    /// Serves the current jobs for `h` time units with no arrivals. Returns the
    /// departures that happened along the way.
    pub fn step_service(&mut self, h: f64, cfg: &SimConfig) -> Result<Vec<Event>, SimError> {
        let mut events = Vec::new();
        let mut series = Vec::new();
        let target = self.clock + h;
        self.advance_to(target, cfg, &mut events, &mut series)?;
        Ok(events)
    }

    /// Removes jobs already at or below the threshold (ties by id).
    fn depart_finished(&mut self, cfg: &SimConfig, events: &mut Vec<Event>) {
        let eps = cfg.depart_threshold;
        let mut gone: Vec<Job> = Vec::new();
        self.jobs.retain(|j| {
            if j.remaining <= eps {
                gone.push(j.clone());
                false
            } else {
                true
            }
        });
        gone.sort_by_key(|j| j.id);
        for j in gone {
            self.departures += 1;
            self.discarded_work += j.remaining.max(0.0);
            events.push(Event {
                time: self.clock,
                kind: EventKind::Departure,
                job_id: j.id,
                requirement: j.requirement,
            });
        }
    }

    fn advance_to(
        &mut self,
        target: f64,
        cfg: &SimConfig,
        events: &mut Vec<Event>,
        series: &mut Vec<SeriesPoint>,
    ) -> Result<(), SimError> {
        let weight = self.params.weight;
        let mut rem: Vec<f64> = Vec::new();
        let mut full = Vec::new();
        let mut mid = Vec::new();
        let mut half = Vec::new();
        while self.clock < target {
            if self.jobs.is_empty() {
                self.clock = target;
                break;
            }
            rem.clear();
            rem.extend(self.jobs.iter().map(|j| j.remaining));
            let left = target - self.clock;
            if shares_of(&rem, &weight).is_none() {
                return Err(SimError::Degenerate { time: self.clock });
            }
            let mut h = self.step_hint.min(cfg.max_step).min(left);
            // step halving until the doubled-step estimate meets the tolerance;
            // a stage that overshoots every job past zero also forces a halving
            let err = loop {
                let ok = rk4_step(&rem, h, &weight, &mut full).is_some()
                    && doubled_rk4(&rem, h, &weight, &mut mid, &mut half).is_some();
                let err = if ok {
                    full.iter()
                        .zip(&half)
                        .map(|(a, b)| (a - b).abs() / (15.0 * (1.0 + b.abs())))
                        .fold(0.0, f64::max)
                } else {
                    f64::INFINITY
                };
                if err <= cfg.tolerance {
                    break err;
                }
                h *= 0.5;
                if h < cfg.min_step {
                    return Err(SimError::StepFailure {
                        time: self.clock,
                        step: h,
                    });
                }
            };
            self.step_hint = if err == 0.0 {
                2.0 * h
            } else {
                h * (0.9 * (cfg.tolerance / err).powf(0.2)).clamp(0.2, 2.0)
            };
            let eps = cfg.depart_threshold;
            let mut taken = h;
            if half.iter().any(|&r| r <= eps) {
                // earliest threshold crossing inside (0, h]
                let mut lo = 0.0;
                let mut hi = h;
                while hi - lo > 1e-12 {
                    let t = 0.5 * (lo + hi);
                    let crossed = doubled_rk4(&rem, t, &weight, &mut mid, &mut half).is_none()
                        || half.iter().any(|&r| r <= eps);
                    if crossed {
                        hi = t;
                    } else {
                        lo = t;
                    }
                }
                doubled_rk4(&rem, hi, &weight, &mut mid, &mut half)
                    .ok_or(SimError::Degenerate { time: self.clock })?;
                taken = hi;
            }
            for (j, &r) in self.jobs.iter_mut().zip(&half) {
                let served = j.remaining - r;
                j.attained += served;
                j.remaining = r;
            }
            self.busy_time += taken;
            self.clock = if taken == left {
                target
            } else {
                self.clock + taken
            };
            if self.jobs.iter().any(|j| j.remaining <= eps) {
                series.push(self.series_point());
                self.depart_finished(cfg, events);
                series.push(self.series_point());
            }
        }
        Ok(())
    }

    fn admit_arrival(&mut self, events: &mut Vec<Event>, cfg: &SimConfig) {
        let requirement = self.params.service.sample(&mut self.service_rng);
        let id = self.next_id;
        self.next_id += 1;
        self.arrivals += 1;
        self.arrived_work += requirement;
        self.jobs.push(Job::new(id, self.clock, requirement));
        events.push(Event {
            time: self.clock,
            kind: EventKind::Arrival,
            job_id: id,
            requirement,
        });
        // a requirement at or below the threshold leaves at once
        self.depart_finished(cfg, events);
        self.step_hint = f64::INFINITY;
    }
}

/// One classical RK4 step of the share dynamics. `None` if every weight is 0.
fn rk4_step(rem: &[f64], h: f64, weight: &WeightFunction, out: &mut Vec<f64>) -> Option<()> {
    let k1 = shares_of(rem, weight)?;
    let s2: Vec<f64> = rem.iter().zip(&k1).map(|(r, k)| r - 0.5 * h * k).collect();
    let k2 = shares_of(&s2, weight)?;
    let s3: Vec<f64> = rem.iter().zip(&k2).map(|(r, k)| r - 0.5 * h * k).collect();
    let k3 = shares_of(&s3, weight)?;
    let s4: Vec<f64> = rem.iter().zip(&k3).map(|(r, k)| r - h * k).collect();
    let k4 = shares_of(&s4, weight)?;
    out.clear();
    out.extend(
        (0..rem.len()).map(|i| rem[i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])),
    );
    Some(())
}

fn doubled_rk4(
    rem: &[f64],
    h: f64,
    weight: &WeightFunction,
    mid: &mut Vec<f64>,
    out: &mut Vec<f64>,
) -> Option<()> {
    rk4_step(rem, 0.5 * h, weight, mid)?;
    rk4_step(mid, 0.5 * h, weight, out)
}

/// Simulates `[0, cfg.horizon]` from the given initial jobs.
pub fn run(params: &SystemParameters, init: Vec<Job>, cfg: &SimConfig) -> Result<Trace, SimError> {
    cfg.validate()?;
    let mut state = SimulationState::new(*params, init, cfg.seed)?;
    let mut trace = Trace {
        seed: cfg.seed,
        horizon: cfg.horizon,
        initial_jobs: state.jobs.len(),
        initial_workload: state.workload(),
        events: Vec::new(),
        series: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut snaps = cfg.snapshot_times.clone();
    snaps.sort_by(f64::total_cmp);
    snaps.dedup();
    let mut next_snap = 0;

    trace.series.push(state.series_point());
    if state
        .jobs
        .iter()
        .any(|j| j.remaining <= cfg.depart_threshold)
    {
        state.depart_finished(cfg, &mut trace.events);
        trace.series.push(state.series_point());
    }
    state.next_arrival = params.arrival.sample_first(&mut state.arrival_rng);

    loop {
        while next_snap < snaps.len() && snaps[next_snap] <= state.clock {
            trace.snapshots.push(state.snapshot());
            next_snap += 1;
        }
        if state.clock >= cfg.horizon {
            break;
        }
        let mut target = cfg.horizon;
        if let Some(a) = state.next_arrival {
            target = target.min(a);
        }
        if let Some(&s) = snaps.get(next_snap) {
            target = target.min(s);
        }
        state.advance_to(target, cfg, &mut trace.events, &mut trace.series)?;
        while let Some(a) = state.next_arrival.filter(|&a| a <= state.clock) {
            trace.series.push(state.series_point());
            state.admit_arrival(&mut trace.events, cfg);
            trace.series.push(state.series_point());
            state.next_arrival = params
                .arrival
                .sample_next(&mut state.arrival_rng)
                .map(|u| a + u);
        }
    }
    if trace.series.last().map(|p| p.time) != Some(state.clock) {
        trace.series.push(state.series_point());
    }
    Ok(trace)
}
