//! Weighted processor sharing: prelimit simulation, measure-valued fluid
//! limit, and heavy-traffic scaling experiments.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fluid;
pub mod harness;
pub mod io;
pub mod measure;
pub mod model;
pub mod simulator;

pub use fluid::{
    fluid_step, picard_apply, picard_iterate, picard_residual, solve_direct, solve_direct_partial,
    workload_series, FluidConfig, FluidError, PicardConfig, PicardDiagnostics, Transport,
};
pub use harness::{
    initial_jobs_from_theta, run_scaling, seed_for, ConvergenceReport, HarnessError, InitMode,
    ScalingExperiment,
};
pub use measure::{
    bl_distance, path_distance, Atom, AtomicMeasure, FluidPath, MeasureError, PairingFunction,
};
pub use model::{
    quantile_atoms, traffic_intensity, validate_weight, ArrivalModel, Distribution, FirstInterval,
    ModelError, ServiceDistribution, SystemParameters, TestFunction, WeightFunction,
};
pub use simulator::{run, Job, SimConfig, SimError, SimulationState, Trace};
