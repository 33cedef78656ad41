//! Run configuration: one TOML schema shared by every subcommand.
//!
//! [`parse_config`] materializes every default, so a parsed [`RunConfig`]
//! serializes to a file that parses back to the same value.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use wps_core::harness::{InitMode, ScalingExperiment};
use wps_core::{
    validate_weight, ArrivalModel, AtomicMeasure, Distribution, FirstInterval, FluidConfig, Job,
    SimConfig, SystemParameters, WeightFunction,
};

pub const SCHEMA_VERSION: u32 = 1;

/// One problem found in a config, anchored to a field and, when known, a line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigIssue {
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// A probability law given by family name and its parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawBlock {
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalBlock {
    pub rate: Option<f64>,
    /// Inter-arrival law up to scale; rescaled to mean `1 / rate`.
    pub shape: Option<LawBlock>,
    pub first_interval: Option<FirstInterval>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightBlock {
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaBlock {
    /// `[location, mass]` pairs.
    pub atoms: Option<Vec<(f64, f64)>>,
}

/// Jobs present at time zero for `simulate`: explicit requirements, or else
/// `round(r <1, theta>)` jobs drawn from `theta`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub requirements: Option<Vec<f64>>,
    pub r: Option<u64>,
    pub mode: Option<InitMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub horizon: Option<f64>,
    pub depart_threshold: Option<f64>,
    pub max_step: Option<f64>,
    pub min_step: Option<f64>,
    pub tolerance: Option<f64>,
    pub snapshot_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidBlock {
    pub dt: Option<f64>,
    pub quadrature: Option<usize>,
    pub prune: Option<f64>,
    /// Defaults to `1e-3 <w, theta>`.
    pub floor: Option<f64>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardBlock {
    /// Defaults to the largest window the contraction target allows.
    pub window: Option<f64>,
    pub contraction: Option<f64>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingBlock {
    pub r_values: Option<Vec<u64>>,
    pub replications: Option<usize>,
    pub checkpoints: Option<Vec<f64>>,
    pub init_mode: Option<InitMode>,
    pub perturbation: Option<f64>,
    pub allow_off_critical: Option<bool>,
}

/// Full configuration tree. After [`parse_config`] every optional field that
/// has a default holds it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: Option<u32>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub arrival: ArrivalBlock,
    #[serde(default)]
    pub service: LawBlock,
    #[serde(default)]
    pub weight: WeightBlock,
    #[serde(default)]
    pub theta: ThetaBlock,
    #[serde(default)]
    pub initial: InitialBlock,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub fluid: FluidBlock,
    #[serde(default)]
    pub picard: PicardBlock,
    #[serde(default)]
    pub scaling: ScalingBlock,
}

/// Parses, materializes defaults and validates. Errors carry field paths and
/// line numbers.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s));
        let message = e.message().to_string();
        ConfigErrors(vec![ConfigIssue {
            path: field_in_message(&message).unwrap_or_default(),
            line,
            message,
        }])
    })?;
    raw.resolve().map_err(|mut errs| {
        for e in &mut errs.0 {
            e.line = locate(text, &e.path);
        }
        errs
    })
}

/// Accepts TOML or a JSON run manifest with a `config` member.
pub fn parse_config_or_manifest(text: &str) -> Result<RunConfig, ConfigErrors> {
    if text.trim_start().starts_with('{') {
        let issue = |message: String| {
            ConfigErrors(vec![ConfigIssue {
                path: "config".into(),
                line: None,
                message,
            }])
        };
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| issue(e.to_string()))?;
        let config = value
            .get("config")
            .ok_or_else(|| issue("manifest has no config member".into()))?;
        let raw: RunConfig =
            serde_json::from_value(config.clone()).map_err(|e| issue(e.to_string()))?;
        return raw.resolve();
    }
    parse_config(text)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("config is representable as TOML")
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

fn field_in_message(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// Line of `path` (`table.sub.key`) in `text`, falling back to its nearest
/// enclosing table header.
pub fn locate(text: &str, path: &str) -> Option<usize> {
    let parts: Vec<&str> = path.split('.').collect();
    for cut in (0..parts.len()).rev() {
        let table = parts[..cut].join(".");
        let key = parts[cut];
        let mut current = String::new();
        for (i, line) in text.lines().enumerate() {
            let l = line.trim();
            if let Some(h) = l.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
                current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
                if current == path {
                    return Some(i + 1);
                }
                continue;
            }
            if current == table {
                if let Some(rest) = l.strip_prefix(key) {
                    if rest.trim_start().starts_with('=') {
                        return Some(i + 1);
                    }
                }
            }
        }
    }
    None
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            path: path.into(),
            line: None,
            message: message.into(),
        });
    }
}

fn fill<T: Clone>(slot: &mut Option<T>, default: T) -> T {
    slot.get_or_insert(default).clone()
}

impl LawBlock {
    fn resolve(
        &mut self,
        path: &str,
        default_family: &str,
        issues: &mut Issues,
    ) -> Option<Distribution> {
        let family = fill(&mut self.family, default_family.to_string());
        let allowed: &[&str] = match family.as_str() {
            "exponential" => &["mean"],
            "deterministic" => &["value"],
            "uniform" => &["low", "high"],
            "hyper_exponential" => &["p", "mean1", "mean2"],
            other => {
                issues.push(
                    &format!("{path}.family"),
                    format!("unknown family {other:?}; expected exponential, deterministic, uniform or hyper_exponential"),
                );
                return None;
            }
        };
        let given = [
            ("mean", self.mean),
            ("value", self.value),
            ("low", self.low),
            ("high", self.high),
            ("p", self.p),
            ("mean1", self.mean1),
            ("mean2", self.mean2),
        ];
        for (name, v) in given {
            if v.is_some() && !allowed.contains(&name) {
                issues.push(
                    &format!("{path}.{name}"),
                    format!("not a parameter of {family}"),
                );
            }
        }
        let law = match family.as_str() {
            "exponential" => Distribution::Exponential {
                mean: fill(&mut self.mean, 1.0),
            },
            "deterministic" => Distribution::Deterministic {
                value: fill(&mut self.value, 1.0),
            },
            "uniform" => Distribution::Uniform {
                low: fill(&mut self.low, 0.0),
                high: fill(&mut self.high, 2.0),
            },
            _ => Distribution::HyperExponential {
                p: fill(&mut self.p, 0.5),
                mean1: fill(&mut self.mean1, 0.5),
                mean2: fill(&mut self.mean2, 1.5),
            },
        };
        match law.validate() {
            Ok(()) => Some(law),
            Err(e) => {
                issues.push(&format!("{path}.family"), e.to_string());
                None
            }
        }
    }
}

impl WeightBlock {
    fn resolve(&mut self, issues: &mut Issues) -> Option<WeightFunction> {
        let family = fill(&mut self.family, "exp_saturation".to_string());
        let allowed: &[&str] = match family.as_str() {
            "saturating" => &[],
            "exp_saturation" => &["rate"],
            "truncated_linear" => &["cap"],
            "constant" => &["level"],
            other => {
                issues.push(
                    "weight.family",
                    format!("unknown family {other:?}; expected saturating, exp_saturation, truncated_linear or constant"),
                );
                return None;
            }
        };
        for (name, v) in [
            ("rate", self.rate),
            ("cap", self.cap),
            ("level", self.level),
        ] {
            if v.is_some() && !allowed.contains(&name) {
                issues.push(
                    &format!("weight.{name}"),
                    format!("not a parameter of {family}"),
                );
            }
        }
        let w = match family.as_str() {
            "saturating" => WeightFunction::Saturating,
            "exp_saturation" => WeightFunction::ExpSaturation {
                rate: fill(&mut self.rate, 1.0),
            },
            "truncated_linear" => WeightFunction::TruncatedLinear {
                cap: fill(&mut self.cap, 100.0),
            },
            _ => WeightFunction::Constant {
                level: fill(&mut self.level, 1.0),
            },
        };
        if let Err(e) = w.check_parameters() {
            issues.push("weight.family", e.to_string());
            return None;
        }
        match validate_weight(&w, 50.0, 5001) {
            Ok(_) => Some(w),
            Err(e) => {
                issues.push("weight.family", e.to_string());
                None
            }
        }
    }
}

fn positive(issues: &mut Issues, path: &str, x: f64) {
    if !(x > 0.0 && x.is_finite()) {
        issues.push(path, format!("must be positive and finite, got {x}"));
    }
}

impl RunConfig {
    /// Fills every default and validates. Idempotent.
    pub fn resolve(mut self) -> Result<RunConfig, ConfigErrors> {
        let mut issues = Issues(Vec::new());
        let version = fill(&mut self.schema_version, SCHEMA_VERSION);
        if version != SCHEMA_VERSION {
            issues.push(
                "schema_version",
                format!("unsupported schema version {version}; expected {SCHEMA_VERSION}"),
            );
        }
        fill(&mut self.seed, 0);

        self.service.resolve("service", "exponential", &mut issues);
        let weight = self.weight.resolve(&mut issues);
        let rate = fill(&mut self.arrival.rate, 1.0);
        let shape = self
            .arrival
            .shape
            .get_or_insert_with(LawBlock::default)
            .resolve("arrival.shape", "exponential", &mut issues);
        let first = fill(&mut self.arrival.first_interval, FirstInterval::Equilibrium);
        if let Some(Err(e)) = shape.map(|s| ArrivalModel::new(rate, s, first)) {
            issues.push("arrival.rate", e.to_string());
        }

        let atoms = fill(&mut self.theta.atoms, vec![(0.5, 0.5), (2.0, 0.5)]);
        let theta = match AtomicMeasure::from_pairs(&atoms) {
            Ok(t) if t.total_mass() > 0.0 => Some(t),
            Ok(_) => {
                issues.push("theta.atoms", "theta must have positive mass");
                None
            }
            Err(e) => {
                issues.push("theta.atoms", e.to_string());
                None
            }
        };

        if let Some(reqs) = &self.initial.requirements {
            if let Some(x) = reqs.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                issues.push(
                    "initial.requirements",
                    format!("requirements must be positive, got {x}"),
                );
            }
        }
        if fill(&mut self.initial.r, 1) == 0 {
            issues.push("initial.r", "must be at least 1");
        }
        fill(&mut self.initial.mode, InitMode::Sampled);

        let sim_default = SimConfig {
            horizon: 10.0,
            ..SimConfig::default()
        };
        let sim = SimConfig {
            horizon: fill(&mut self.sim.horizon, sim_default.horizon),
            depart_threshold: fill(&mut self.sim.depart_threshold, sim_default.depart_threshold),
            max_step: fill(&mut self.sim.max_step, sim_default.max_step),
            min_step: fill(&mut self.sim.min_step, sim_default.min_step),
            tolerance: fill(&mut self.sim.tolerance, sim_default.tolerance),
            snapshot_times: fill(&mut self.sim.snapshot_times, Vec::new()),
            seed: 0,
        };
        if let Err(e) = sim.validate() {
            issues.push("sim", e.to_string());
        }

        let dt = fill(&mut self.fluid.dt, 0.01);
        let quadrature = fill(&mut self.fluid.quadrature, 200);
        let prune = fill(&mut self.fluid.prune, 1e-9);
        let horizon = fill(&mut self.fluid.horizon, 1.0);
        let floor = match (&theta, weight) {
            (Some(t), Some(w)) => {
                fill(&mut self.fluid.floor, wps_core::fluid::default_floor(t, &w))
            }
            _ => self.fluid.floor.unwrap_or(f64::NAN),
        };
        let fluid = FluidConfig {
            dt,
            quadrature,
            prune,
            floor,
            horizon,
            transport: Default::default(),
        };
        if theta.is_some() && weight.is_some() {
            if let Err(e) = fluid.validate() {
                issues.push("fluid", e.to_string());
            }
        }

        let contraction = fill(&mut self.picard.contraction, 0.5);
        fill(&mut self.picard.max_iterations, 50);
        let tolerance = fill(&mut self.picard.tolerance, 1e-10);
        positive(&mut issues, "picard.tolerance", tolerance);
        if !(contraction > 0.0 && contraction < 1.0) {
            issues.push(
                "picard.contraction",
                format!("must lie in (0, 1), got {contraction}"),
            );
        } else if let Some(w) = weight {
            if floor.is_finite() {
                // window against dt is checked by the picard subcommand only
                let limit = wps_core::fluid::max_window(contraction, floor, &w);
                let window = fill(&mut self.picard.window, limit);
                if !(window > 0.0) || window > limit * (1.0 + 1e-12) {
                    issues.push("picard.window", format!("must lie in (0, {limit}]"));
                }
            }
        }

        let r_values = fill(&mut self.scaling.r_values, vec![5, 20, 80]);
        let replications = fill(&mut self.scaling.replications, 20);
        let checkpoints = fill(&mut self.scaling.checkpoints, vec![0.5, 1.0]);
        fill(&mut self.scaling.init_mode, InitMode::Sampled);
        let perturbation = fill(&mut self.scaling.perturbation, 0.0);
        fill(&mut self.scaling.allow_off_critical, false);
        if r_values.is_empty() || r_values[0] == 0 || r_values.windows(2).any(|p| p[0] >= p[1]) {
            issues.push(
                "scaling.r_values",
                "r values must be positive and strictly increasing",
            );
        }
        if replications == 0 {
            issues.push("scaling.replications", "need at least one replication");
        }
        if checkpoints.is_empty() || checkpoints.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            issues.push(
                "scaling.checkpoints",
                "checkpoints must be nonempty, finite and nonnegative",
            );
        } else if let Some(t) = checkpoints
            .iter()
            .find(|&&t| wps_core::fluid::grid_steps(t, dt).is_none())
        {
            issues.push(
                "scaling.checkpoints",
                format!("fluid dt {dt} does not divide checkpoint {t}"),
            );
        }
        if !(perturbation >= 0.0) || perturbation >= r_values.first().copied().unwrap_or(1) as f64 {
            issues.push("scaling.perturbation", "must lie in [0, min r)");
        }

        if issues.0.is_empty() {
            Ok(self)
        } else {
            Err(ConfigErrors(issues.0))
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn law(block: &LawBlock) -> Distribution {
        let mut b = block.clone();
        b.resolve("", "exponential", &mut Issues(Vec::new()))
            .expect("resolved config")
    }

    pub fn params(&self) -> SystemParameters {
        let mut wb = self.weight.clone();
        let weight = wb
            .resolve(&mut Issues(Vec::new()))
            .expect("resolved config");
        let shape = Self::law(self.arrival.shape.as_ref().expect("resolved config"));
        let arrival = ArrivalModel::new(
            self.arrival.rate.expect("resolved config"),
            shape,
            self.arrival.first_interval.expect("resolved config"),
        )
        .expect("resolved config");
        SystemParameters::new(arrival, Self::law(&self.service), weight).expect("resolved config")
    }

    pub fn theta(&self) -> AtomicMeasure {
        AtomicMeasure::from_pairs(self.theta.atoms.as_deref().expect("resolved config"))
            .expect("resolved config")
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            horizon: s.horizon.expect("resolved config"),
            depart_threshold: s.depart_threshold.expect("resolved config"),
            max_step: s.max_step.expect("resolved config"),
            min_step: s.min_step.expect("resolved config"),
            tolerance: s.tolerance.expect("resolved config"),
            seed: self.seed(),
            snapshot_times: s.snapshot_times.clone().expect("resolved config"),
        }
    }

    pub fn fluid_config(&self) -> FluidConfig {
        let f = &self.fluid;
        FluidConfig {
            dt: f.dt.expect("resolved config"),
            quadrature: f.quadrature.expect("resolved config"),
            prune: f.prune.expect("resolved config"),
            floor: f.floor.expect("resolved config"),
            horizon: f.horizon.expect("resolved config"),
            transport: Default::default(),
        }
    }

    pub fn picard_config(&self) -> wps_core::PicardConfig {
        let p = &self.picard;
        wps_core::PicardConfig {
            window: p.window.expect("resolved config"),
            contraction: p.contraction.expect("resolved config"),
            max_iterations: p.max_iterations.expect("resolved config"),
            tolerance: p.tolerance.expect("resolved config"),
        }
    }

    /// Jobs present at time zero for `simulate`.
    pub fn initial_jobs(&self) -> Vec<Job> {
        match &self.initial.requirements {
            Some(reqs) => reqs
                .iter()
                .enumerate()
                .map(|(i, &x)| Job::initial(i as u64, x))
                .collect(),
            None => wps_core::harness::initial_jobs(
                &self.theta(),
                self.initial.r.expect("resolved config"),
                self.seed(),
                self.initial.mode.expect("resolved config"),
            )
            .expect("theta has positive mass"),
        }
    }

    pub fn experiment(&self) -> ScalingExperiment {
        let s = &self.scaling;
        ScalingExperiment {
            r_values: s.r_values.clone().expect("resolved config"),
            replications: s.replications.expect("resolved config"),
            seed: self.seed(),
            checkpoints: s.checkpoints.clone().expect("resolved config"),
            params: self.params(),
            theta: self.theta(),
            fluid: self.fluid_config(),
            sim: self.sim_config(),
            init_mode: s.init_mode.expect("resolved config"),
            perturbation: s.perturbation.expect("resolved config"),
            allow_off_critical: s.allow_off_critical.expect("resolved config"),
        }
    }
}
