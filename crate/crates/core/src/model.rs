//! Primitive ingredients of the queue: weight functions, service and
//! inter-arrival laws, the delayed renewal arrival stream, and the test
//! functions against which the fluid dynamics are checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Atom, AtomicMeasure, PairingFunction};

/// `|rho - 1|` allowed for a configuration declared critically loaded.
pub const HEAVY_TRAFFIC_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("weight function violates its assumptions at x = {x}: {reason}")]
    WeightViolation { x: f64, reason: String },
    #[error("invalid {family} parameters: {reason}")]
    BadParameters { family: String, reason: String },
    #[error("arrival rate must be finite and nonnegative, got {0}")]
    BadRate(f64),
    #[error("traffic intensity {rho} is not 1 (|rho - 1| > {HEAVY_TRAFFIC_TOLERANCE})")]
    NotHeavyTraffic { rho: f64 },
    #[error("test function {name} is not admissible: {reason}")]
    InadmissibleTest { name: String, reason: String },
    #[error("validation grid needs grid_max > 0 and at least 2 points")]
    BadGrid,
}

/// Share-determining weight `w` of a job with remaining work `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightFunction {
    /// `x / (1 + x)`.
    Saturating,
    /// `1 - exp(-rate * x)`.
    ExpSaturation { rate: f64 },
    /// `min(x, cap)`. Only weakly increasing past `cap`; a fixture for the
    /// proportional-shrink closed form.
    TruncatedLinear { cap: f64 },
    /// Classic processor sharing, `w = level`. Fails validation (`w(0) != 0`).
    Constant { level: f64 },
}

impl WeightFunction {
    pub fn evaluate(&self, x: f64) -> f64 {
        match *self {
            WeightFunction::Saturating => x / (1.0 + x),
            WeightFunction::ExpSaturation { rate } => -(-rate * x).exp_m1(),
            WeightFunction::TruncatedLinear { cap } => x.min(cap),
            WeightFunction::Constant { level } => level,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            WeightFunction::Saturating => 1.0 / ((1.0 + x) * (1.0 + x)),
            WeightFunction::ExpSaturation { rate } => rate * (-rate * x).exp(),
            WeightFunction::TruncatedLinear { cap } => {
                if x < cap {
                    1.0
                } else {
                    0.0
                }
            }
            WeightFunction::Constant { .. } => 0.0,
        }
    }

    /// `sup_x |w(x)|`.
    pub fn sup_bound(&self) -> f64 {
        match *self {
            WeightFunction::Saturating | WeightFunction::ExpSaturation { .. } => 1.0,
            WeightFunction::TruncatedLinear { cap } => cap,
            WeightFunction::Constant { level } => level.abs(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightFunction::Saturating => "saturating",
            WeightFunction::ExpSaturation { .. } => "exp_saturation",
            WeightFunction::TruncatedLinear { .. } => "truncated_linear",
            WeightFunction::Constant { .. } => "constant",
        }
    }

    pub fn check_parameters(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| {
            Err(ModelError::BadParameters {
                family: self.name().into(),
                reason: reason.into(),
            })
        };
        match *self {
            WeightFunction::ExpSaturation { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad("rate must be positive")
            }
            WeightFunction::TruncatedLinear { cap } if !(cap > 0.0 && cap.is_finite()) => {
                bad("cap must be positive")
            }
            WeightFunction::Constant { level } if !level.is_finite() => bad("level must be finite"),
            _ => Ok(()),
        }
    }
}

/// Outcome of [`validate_weight`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightReport {
    pub sup_bound: f64,
    /// Smallest derivative seen on the grid (the worst margin).
    pub min_derivative: f64,
    pub max_value: f64,
    /// Non-fatal findings, e.g. a flat region of a truncated weight.
    pub flags: Vec<String>,
}

/// Checks `w(0) = 0`, `w' > 0` and `0 <= w <= sup_bound` on a uniform grid of
/// `[0, grid_max]`.
pub fn validate_weight(
    w: &WeightFunction,
    grid_max: f64,
    n_points: usize,
) -> Result<WeightReport, ModelError> {
    if !(grid_max > 0.0) || n_points < 2 {
        return Err(ModelError::BadGrid);
    }
    w.check_parameters()
        .map_err(|e| ModelError::WeightViolation {
            x: 0.0,
            reason: e.to_string(),
        })?;
    let w0 = w.evaluate(0.0);
    if w0 != 0.0 {
        return Err(ModelError::WeightViolation {
            x: 0.0,
            reason: format!("w(0) = {w0} but w(0) = 0 is required"),
        });
    }
    let sup = w.sup_bound();
    let mut report = WeightReport {
        sup_bound: sup,
        min_derivative: f64::INFINITY,
        max_value: 0.0,
        flags: Vec::new(),
    };
    let mut flat_from: Option<f64> = None;
    for k in 0..n_points {
        let x = grid_max * k as f64 / (n_points - 1) as f64;
        let v = w.evaluate(x);
        let d = w.derivative(x);
        if !(v >= 0.0 && v <= sup) {
            return Err(ModelError::WeightViolation {
                x,
                reason: format!("w(x) = {v} outside [0, {sup}]"),
            });
        }
        if !(d > 0.0) {
            match w {
                WeightFunction::TruncatedLinear { cap } if x >= *cap => {
                    flat_from.get_or_insert(x);
                }
                _ => {
                    return Err(ModelError::WeightViolation {
                        x,
                        reason: format!("w'(x) = {d} is not positive"),
                    })
                }
            }
        }
        report.min_derivative = report.min_derivative.min(d);
        report.max_value = report.max_value.max(v);
    }
    if let Some(x) = flat_from {
        report.flags.push(format!(
            "only weakly increasing: w' = 0 from x = {x}; admissible as a fixture only while remaining work stays below the cap"
        ));
    }
    Ok(report)
}

/// Laws on `[0, inf)` used for service requirements and inter-arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Distribution {
    Exponential {
        mean: f64,
    },
    Deterministic {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Two-phase mixture: `Exp(mean1)` with probability `p`, else `Exp(mean2)`.
    HyperExponential {
        p: f64,
        mean1: f64,
        mean2: f64,
    },
}

/// Service requirement law `nu`.
pub type ServiceDistribution = Distribution;

impl Distribution {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| {
            Err(ModelError::BadParameters {
                family: self.name().into(),
                reason: reason.into(),
            })
        };
        let pos = |v: f64| v > 0.0 && v.is_finite();
        match *self {
            Distribution::Exponential { mean } if !pos(mean) => bad("mean must be positive"),
            Distribution::Deterministic { value } if !pos(value) => bad("value must be positive"),
            Distribution::Uniform { low, high } if !(low >= 0.0 && pos(high) && low < high) => {
                bad("need 0 <= low < high")
            }
            Distribution::HyperExponential { p, mean1, mean2 }
                if !((0.0..=1.0).contains(&p) && pos(mean1) && pos(mean2)) =>
            {
                bad("need p in [0, 1] and positive means")
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Exponential { .. } => "exponential",
            Distribution::Deterministic { .. } => "deterministic",
            Distribution::Uniform { .. } => "uniform",
            Distribution::HyperExponential { .. } => "hyperexponential",
        }
    }

    /// `<x, nu>`.
    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Exponential { mean } => mean,
            Distribution::Deterministic { value } => value,
            Distribution::Uniform { low, high } => 0.5 * (low + high),
            Distribution::HyperExponential { p, mean1, mean2 } => p * mean1 + (1.0 - p) * mean2,
        }
    }

    /// Same shape, every length multiplied so that the mean becomes `mean`.
    pub fn with_mean(&self, mean: f64) -> Distribution {
        let c = mean / self.mean();
        match *self {
            Distribution::Exponential { .. } => Distribution::Exponential { mean },
            Distribution::Deterministic { .. } => Distribution::Deterministic { value: mean },
            Distribution::Uniform { low, high } => Distribution::Uniform {
                low: low * c,
                high: high * c,
            },
            Distribution::HyperExponential { p, mean1, mean2 } => Distribution::HyperExponential {
                p,
                mean1: mean1 * c,
                mean2: mean2 * c,
            },
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match *self {
            Distribution::Exponential { mean } => -(-x / mean).exp_m1(),
            Distribution::Deterministic { value } => {
                if x >= value {
                    1.0
                } else {
                    0.0
                }
            }
            Distribution::Uniform { low, high } => ((x - low) / (high - low)).clamp(0.0, 1.0),
            Distribution::HyperExponential { p, mean1, mean2 } => {
                p * -(-x / mean1).exp_m1() + (1.0 - p) * -(-x / mean2).exp_m1()
            }
        }
    }

    /// Left-continuous inverse of the cdf; `p` is clamped to `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match *self {
            Distribution::Exponential { mean } => -mean * (-p).ln_1p(),
            Distribution::Deterministic { value } => value,
            Distribution::Uniform { low, high } => low + p * (high - low),
            Distribution::HyperExponential { mean1, mean2, .. } => {
                if p >= 1.0 {
                    return f64::INFINITY;
                }
                if p <= 0.0 {
                    return 0.0;
                }
                let mut lo = 0.0;
                let mut hi = mean1.max(mean2);
                while self.cdf(hi) < p {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < p {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-15 * hi {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Exponential { mean } => sample_exp(mean, rng),
            Distribution::Deterministic { value } => value,
            Distribution::Uniform { low, high } => rng.random_range(low..high),
            Distribution::HyperExponential { p, mean1, mean2 } => {
                let m = if rng.random::<f64>() < p {
                    mean1
                } else {
                    mean2
                };
                sample_exp(m, rng)
            }
        }
    }

    /// `<g, nu>` by composite Gauss-Legendre quadrature (exact for point masses).
    pub fn expectation(&self, g: impl Fn(f64) -> f64) -> f64 {
        match *self {
            Distribution::Deterministic { value } => g(value),
            Distribution::Uniform { low, high } => {
                gauss_legendre(&g, low, high, 256) / (high - low)
            }
            Distribution::Exponential { mean } => exp_expectation(&g, mean),
            Distribution::HyperExponential { p, mean1, mean2 } => {
                p * exp_expectation(&g, mean1) + (1.0 - p) * exp_expectation(&g, mean2)
            }
        }
    }

    /// Stationary-excess law, where it has a closed form.
    pub fn equilibrium(&self) -> Option<Distribution> {
        match *self {
            Distribution::Exponential { .. } => Some(*self),
            Distribution::Deterministic { value } => Some(Distribution::Uniform {
                low: 0.0,
                high: value,
            }),
            Distribution::HyperExponential { p, mean1, mean2 } => {
                let m = self.mean();
                Some(Distribution::HyperExponential {
                    p: p * mean1 / m,
                    mean1,
                    mean2,
                })
            }
            Distribution::Uniform { .. } => None,
        }
    }
}

fn sample_exp<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    Exp::new(1.0 / mean).expect("positive rate").sample(rng)
}

fn exp_expectation(g: &impl Fn(f64) -> f64, mean: f64) -> f64 {
    // x = mean * y; e^{-40} is below double precision relative to 1.
    gauss_legendre(&|y: f64| g(mean * y) * (-y).exp(), 0.0, 40.0, 400)
}

fn gauss_legendre(g: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const NODES: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_47,
        0.478_628_670_499_366_47,
        0.236_926_885_056_189_08,
        0.236_926_885_056_189_08,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        let mid = a + (i as f64 + 0.5) * h;
        let half = 0.5 * h;
        total += NODES
            .iter()
            .zip(WEIGHTS)
            .map(|(&x, w)| w * g(mid + half * x))
            .sum::<f64>()
            * half;
    }
    total
}

/// Deterministic quadrature of `nu`: `n` atoms of mass `1/n` at the midpoint
/// quantiles `F^{-1}((j - 1/2) / n)`.
pub fn quantile_atoms(nu: &Distribution, n: usize) -> AtomicMeasure {
    let n = n.max(1);
    let mass = 1.0 / n as f64;
    let atoms = (1..=n)
        .map(|j| Atom::new(nu.quantile((j as f64 - 0.5) / n as f64), mass))
        .collect();
    AtomicMeasure::from_valid(atoms)
}

/// A seeded stream of draws from one law.
#[derive(Debug, Clone)]
pub struct Sampler {
    law: Distribution,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(law: Distribution, seed: u64) -> Self {
        Sampler {
            law,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn law(&self) -> &Distribution {
        &self.law
    }
}

impl Iterator for Sampler {
    type Item = f64;
    fn next(&mut self) -> Option<f64> {
        Some(self.law.sample(&mut self.rng))
    }
}

/// How the first (residual) inter-arrival interval is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstInterval {
    /// Stationary-excess law when it has a closed form, else the ordinary law.
    #[default]
    Equilibrium,
    Ordinary,
}

/// Delayed renewal arrival stream with rate `rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    rate: f64,
    inter_arrival: Distribution,
    first: FirstInterval,
}

impl ArrivalModel {
    /// `shape` fixes the law up to scale; it is rescaled to mean `1 / rate`.
    /// A rate of zero means no arrivals.
    pub fn new(rate: f64, shape: Distribution, first: FirstInterval) -> Result<Self, ModelError> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(ModelError::BadRate(rate));
        }
        shape.validate()?;
        let inter_arrival = if rate > 0.0 {
            shape.with_mean(1.0 / rate)
        } else {
            shape
        };
        Ok(ArrivalModel {
            rate,
            inter_arrival,
            first,
        })
    }

    pub fn poisson(rate: f64) -> Result<Self, ModelError> {
        Self::new(
            rate,
            Distribution::Exponential { mean: 1.0 },
            FirstInterval::Equilibrium,
        )
    }

    pub fn none() -> Self {
        Self::poisson(0.0).expect("zero rate is valid")
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn inter_arrival(&self) -> &Distribution {
        &self.inter_arrival
    }

    pub fn first_interval_rule(&self) -> FirstInterval {
        self.first
    }

    /// Law of the first interval.
    pub fn first_interval_law(&self) -> Distribution {
        match self.first {
            FirstInterval::Equilibrium => self
                .inter_arrival
                .equilibrium()
                .unwrap_or(self.inter_arrival),
            FirstInterval::Ordinary => self.inter_arrival,
        }
    }

    /// Same shape and first-interval rule at a different rate.
    pub fn with_rate(&self, rate: f64) -> Result<Self, ModelError> {
        Self::new(rate, self.inter_arrival, self.first)
    }

    pub fn sample_first<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        (self.rate > 0.0).then(|| self.first_interval_law().sample(rng))
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        (self.rate > 0.0).then(|| self.inter_arrival.sample(rng))
    }
}

/// Everything that defines one queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParameters {
    pub arrival: ArrivalModel,
    pub service: Distribution,
    pub weight: WeightFunction,
}

impl SystemParameters {
    pub fn new(
        arrival: ArrivalModel,
        service: Distribution,
        weight: WeightFunction,
    ) -> Result<Self, ModelError> {
        service.validate()?;
        weight.check_parameters()?;
        Ok(SystemParameters {
            arrival,
            service,
            weight,
        })
    }

    pub fn traffic_intensity(&self) -> f64 {
        traffic_intensity(self)
    }

    /// Rejects unless `|rho - 1| <= HEAVY_TRAFFIC_TOLERANCE`.
    pub fn check_heavy_traffic(&self) -> Result<(), ModelError> {
        let rho = self.traffic_intensity();
        if (rho - 1.0).abs() > HEAVY_TRAFFIC_TOLERANCE {
            return Err(ModelError::NotHeavyTraffic { rho });
        }
        Ok(())
    }
}

/// `rho = alpha * <x, nu>`.
pub fn traffic_intensity(p: &SystemParameters) -> f64 {
    p.arrival.rate() * p.service.mean()
}

/// A pairing function in the admissible class: bounded with bounded
/// derivative and `g(0) = g'(0) = 0`.
#[derive(Debug, Clone)]
pub struct TestFunction(PairingFunction);

impl TestFunction {
    pub fn new(g: PairingFunction) -> Result<Self, ModelError> {
        let reject = |reason: String| ModelError::InadmissibleTest {
            name: g.name().into(),
            reason,
        };
        if g.value(0.0).abs() > 1e-15 {
            return Err(reject(format!("g(0) = {} != 0", g.value(0.0))));
        }
        if g.derivative(0.0).abs() > 1e-15 {
            return Err(reject(format!("g'(0) = {} != 0", g.derivative(0.0))));
        }
        if !(g.sup_bound().is_finite() && g.derivative_sup_bound().is_finite()) {
            return Err(reject("g and g' must be bounded".into()));
        }
        if let Some((_, msg)) = g.bound_violation((0..=20_000).map(|k| k as f64 * 0.005)) {
            return Err(reject(msg));
        }
        Ok(TestFunction(g))
    }

    pub fn name(&self) -> &str {
        self.0.name()
    }

    pub fn value(&self, x: f64) -> f64 {
        self.0.value(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.0.derivative(x)
    }

    pub fn pairing(&self) -> &PairingFunction {
        &self.0
    }

    /// The three-function panel used for dynamics checks.
    pub fn panel() -> Vec<TestFunction> {
        let half_sqrt = std::f64::consts::FRAC_1_SQRT_2;
        let fns = [
            PairingFunction::new(
                "1-exp(-x^2)",
                |x| -(-x * x).exp_m1(),
                |x| 2.0 * x * (-x * x).exp(),
                1.0,
                2.0 * half_sqrt * (-0.5f64).exp(),
            ),
            PairingFunction::new(
                "x^2/(1+x^2)",
                |x| x * x / (1.0 + x * x),
                |x| 2.0 * x / ((1.0 + x * x) * (1.0 + x * x)),
                1.0,
                3.0 * 3f64.sqrt() / 8.0,
            ),
            PairingFunction::new(
                "(1-exp(-x))^2",
                |x| {
                    let u = -(-x).exp_m1();
                    u * u
                },
                |x| 2.0 * -(-x).exp_m1() * (-x).exp(),
                1.0,
                0.5,
            ),
        ];
        fns.into_iter()
            .map(|g| TestFunction::new(g).expect("panel functions are admissible"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_validation() {
        let r = validate_weight(&WeightFunction::ExpSaturation { rate: 1.0 }, 20.0, 2001).unwrap();
        assert_eq!(r.sup_bound, 1.0);
        assert!(r.flags.is_empty());
        let r = validate_weight(&WeightFunction::Saturating, 20.0, 2001).unwrap();
        assert_eq!(r.sup_bound, 1.0);
        let err =
            validate_weight(&WeightFunction::Constant { level: 1.0 }, 20.0, 2001).unwrap_err();
        match err {
            ModelError::WeightViolation { x, reason } => {
                assert_eq!(x, 0.0);
                assert!(reason.contains("w(0)"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn truncated_linear_is_flagged_not_rejected() {
        let w = WeightFunction::TruncatedLinear { cap: 5.0 };
        let r = validate_weight(&w, 10.0, 101).unwrap();
        assert_eq!(r.sup_bound, 5.0);
        assert_eq!(r.flags.len(), 1);
        let below = validate_weight(&w, 4.0, 101).unwrap();
        assert!(below.flags.is_empty());
    }

    #[test]
    fn weight_grid_preconditions() {
        let w = WeightFunction::Saturating;
        assert_eq!(validate_weight(&w, 0.0, 10), Err(ModelError::BadGrid));
        assert_eq!(validate_weight(&w, 1.0, 1), Err(ModelError::BadGrid));
        assert!(validate_weight(&WeightFunction::ExpSaturation { rate: -1.0 }, 1.0, 10).is_err());
    }

    #[test]
    fn intensity_examples() {
        let w = WeightFunction::Saturating;
        let p = SystemParameters::new(
            ArrivalModel::poisson(2.0).unwrap(),
            Distribution::Exponential { mean: 0.5 },
            w,
        )
        .unwrap();
        assert_eq!(traffic_intensity(&p), 1.0);
        assert!(p.check_heavy_traffic().is_ok());
        let p = SystemParameters::new(
            ArrivalModel::poisson(1.0).unwrap(),
            Distribution::Deterministic { value: 0.9 },
            w,
        )
        .unwrap();
        assert_eq!(traffic_intensity(&p), 0.9);
        assert!(p.check_heavy_traffic().is_err());
        let p = SystemParameters::new(
            ArrivalModel::poisson(0.5).unwrap(),
            Distribution::Uniform {
                low: 0.0,
                high: 2.0,
            },
            w,
        )
        .unwrap();
        assert_eq!(traffic_intensity(&p), 0.5);
    }

    #[test]
    fn quantile_atom_examples() {
        let exp = Distribution::Exponential { mean: 1.0 };
        let q = quantile_atoms(&exp, 2);
        let a = q.atoms();
        assert_eq!(a.len(), 2);
        assert!((a[0].location - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((a[1].location - 4f64.ln()).abs() < 1e-15);
        assert_eq!((a[0].mass, a[1].mass), (0.5, 0.5));

        let q = quantile_atoms(&exp, 1);
        assert!((q.atoms()[0].location - 2f64.ln()).abs() < 1e-15);
        assert_eq!(q.total_mass(), 1.0);

        let q = quantile_atoms(&Distribution::Deterministic { value: 2.5 }, 7);
        assert!((q.total_mass() - 1.0).abs() < 1e-15);
        assert!(q.atoms().iter().all(|a| a.location == 2.5));
    }

    #[test]
    fn quantile_workload_converges_under_doubling() {
        for nu in [
            Distribution::Exponential { mean: 1.0 },
            Distribution::Uniform {
                low: 0.5,
                high: 3.0,
            },
            Distribution::HyperExponential {
                p: 0.3,
                mean1: 0.2,
                mean2: 2.0,
            },
        ] {
            let mut prev = f64::INFINITY;
            for n in [4, 8, 16, 32, 64, 128] {
                let err = (quantile_atoms(&nu, n).workload() - nu.mean()).abs();
                assert!(err <= prev, "{nu:?} n={n}: {err} > {prev}");
                prev = err;
            }
            assert!(prev < 1e-2);
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let h = Distribution::HyperExponential {
            p: 0.4,
            mean1: 0.5,
            mean2: 3.0,
        };
        for p in [0.01, 0.25, 0.5, 0.9, 0.999] {
            assert!((h.cdf(h.quantile(p)) - p).abs() < 1e-12);
        }
        let mut prev = 0.0;
        for k in 1..100 {
            let q = h.quantile(k as f64 / 100.0);
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn expectation_matches_closed_forms() {
        let exp = Distribution::Exponential { mean: 2.0 };
        assert!((exp.expectation(|x| x) - 2.0).abs() < 1e-12);
        assert!((exp.expectation(|x| x * x) - 8.0).abs() < 1e-11);
        let u = Distribution::Uniform {
            low: 1.0,
            high: 3.0,
        };
        assert!((u.expectation(|x| x * x) - 13.0 / 3.0).abs() < 1e-12);
        let h = Distribution::HyperExponential {
            p: 0.25,
            mean1: 1.0,
            mean2: 3.0,
        };
        assert!((h.expectation(|x| x) - h.mean()).abs() < 1e-12);
        // E[1 - e^{-X}] for X ~ Exp(mean 2) is 1 - 1/(1 + 2)
        assert!((exp.expectation(|x| 1.0 - (-x).exp()) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_is_reproducible_and_unbiased() {
        let law = Distribution::HyperExponential {
            p: 0.5,
            mean1: 0.5,
            mean2: 1.5,
        };
        let a: Vec<f64> = Sampler::new(law, 7).take(100).collect();
        let b: Vec<f64> = Sampler::new(law, 7).take(100).collect();
        assert_eq!(a, b);
        let c: Vec<f64> = Sampler::new(law, 8).take(100).collect();
        assert_ne!(a, c);

        for law in [
            Distribution::Exponential { mean: 0.7 },
            Distribution::Uniform {
                low: 0.0,
                high: 2.0,
            },
            law,
        ] {
            let n = 200_000;
            let mean: f64 = Sampler::new(law, 11).take(n).sum::<f64>() / n as f64;
            // five standard errors; every law here has variance below 4
            assert!(
                (mean - law.mean()).abs() < 5.0 * (4.0 / n as f64).sqrt(),
                "{law:?}"
            );
        }
    }

    #[test]
    fn arrival_rescaling_and_first_interval() {
        let a = ArrivalModel::new(
            4.0,
            Distribution::Uniform {
                low: 1.0,
                high: 3.0,
            },
            FirstInterval::Equilibrium,
        )
        .unwrap();
        assert!((a.inter_arrival().mean() - 0.25).abs() < 1e-15);
        // no closed-form equilibrium for the uniform law
        assert_eq!(a.first_interval_law(), *a.inter_arrival());

        let d = ArrivalModel::new(
            2.0,
            Distribution::Deterministic { value: 1.0 },
            FirstInterval::Equilibrium,
        )
        .unwrap();
        assert_eq!(
            d.first_interval_law(),
            Distribution::Uniform {
                low: 0.0,
                high: 0.5
            }
        );
        let d = ArrivalModel::new(
            2.0,
            Distribution::Deterministic { value: 1.0 },
            FirstInterval::Ordinary,
        )
        .unwrap();
        assert_eq!(
            d.first_interval_law(),
            Distribution::Deterministic { value: 0.5 }
        );

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ArrivalModel::none().sample_first(&mut rng), None);
        assert!(ArrivalModel::poisson(-1.0).is_err());
    }

    #[test]
    fn hyperexponential_equilibrium_has_residual_mean() {
        // E[residual] = E[X^2] / (2 E[X])
        let h = Distribution::HyperExponential {
            p: 0.3,
            mean1: 0.5,
            mean2: 2.0,
        };
        let second = 0.3 * 2.0 * 0.25 + 0.7 * 2.0 * 4.0;
        let eq = h.equilibrium().unwrap();
        assert!((eq.mean() - second / (2.0 * h.mean())).abs() < 1e-14);
    }

    #[test]
    fn panel_is_admissible() {
        let panel = TestFunction::panel();
        assert_eq!(panel.len(), 3);
        for g in &panel {
            assert_eq!(g.value(0.0), 0.0);
            assert_eq!(g.derivative(0.0), 0.0);
        }
    }

    #[test]
    fn inadmissible_test_functions_rejected() {
        let lin = PairingFunction::new("x", |x| x, |_| 1.0, f64::INFINITY, 1.0);
        assert!(TestFunction::new(lin).is_err());
        let sin = PairingFunction::new("sin", f64::sin, f64::cos, 1.0, 1.0);
        assert!(TestFunction::new(sin).is_err());
        let shifted =
            PairingFunction::new("1-e^-x", |x| 1.0 - (-x).exp(), |x| (-x).exp(), 1.0, 1.0);
        assert!(TestFunction::new(shifted).is_err());
    }
}
