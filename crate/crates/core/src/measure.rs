//! Finite atomic measures on the half-line.
//!
//! An [`AtomicMeasure`] is a finite list of weighted point masses kept sorted by
//! location. Everything the simulator and the fluid solver exchange is one of
//! these: the job descriptor of the prelimit queue, the scaled descriptor, the
//! fluid state at a grid time, and quadratures of the service law.
//!
//! The metric used throughout is the bounded-Lipschitz (dual) norm
//!
//! ```text
//! |mu - nu|_BL = sup { <f, mu> - <f, nu> : |f| <= 1, Lip(f) <= 1 }
//! ```
//!
//! which [`bl_distance`] evaluates exactly for atomic measures.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Atoms closer than this in location are merged into one.
pub const COMPACTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("atom location {0} is negative or not finite")]
    BadLocation(f64),
    #[error("atom mass {0} is negative or not finite")]
    BadMass(f64),
    #[error("scaling factor must be positive and finite, got {0}")]
    BadFactor(f64),
    #[error("prune threshold must be nonnegative, got {0}")]
    BadThreshold(f64),
    #[error("time grids differ: {0}")]
    GridMismatch(String),
}

/// One point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: f64,
    pub mass: f64,
}

impl Atom {
    pub fn new(location: f64, mass: f64) -> Self {
        Atom { location, mass }
    }
}

/// Finite nonnegative measure on `[0, inf)` made of point masses.
///
/// Atoms are sorted by location, have strictly positive mass, and no two lie
/// within [`COMPACTION_TOLERANCE`] of each other.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Atom>", into = "Vec<Atom>")]
pub struct AtomicMeasure {
    atoms: Vec<Atom>,
}

impl TryFrom<Vec<Atom>> for AtomicMeasure {
    type Error = MeasureError;
    fn try_from(atoms: Vec<Atom>) -> Result<Self, Self::Error> {
        AtomicMeasure::new(atoms)
    }
}

impl From<AtomicMeasure> for Vec<Atom> {
    fn from(m: AtomicMeasure) -> Self {
        m.atoms
    }
}

impl AtomicMeasure {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates, sorts and compacts a list of atoms. Zero-mass atoms are dropped.
    pub fn new(atoms: Vec<Atom>) -> Result<Self, MeasureError> {
        for a in &atoms {
            if !(a.location.is_finite() && a.location >= 0.0) {
                return Err(MeasureError::BadLocation(a.location));
            }
            if !(a.mass.is_finite() && a.mass >= 0.0) {
                return Err(MeasureError::BadMass(a.mass));
            }
        }
        Ok(Self::from_valid(atoms))
    }

    /// Builds from `(location, mass)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, MeasureError> {
        Self::new(pairs.iter().map(|&(x, m)| Atom::new(x, m)).collect())
    }

    /// Single atom `mass * delta_location`.
    pub fn dirac(location: f64, mass: f64) -> Result<Self, MeasureError> {
        Self::new(vec![Atom::new(location, mass)])
    }

    // Caller guarantees finite nonnegative fields.
    pub(crate) fn from_valid(mut atoms: Vec<Atom>) -> Self {
        atoms.retain(|a| a.mass > 0.0);
        atoms.sort_by(|a, b| a.location.total_cmp(&b.location));
        let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
        // cluster anchor, running mass, running first moment about the anchor
        let mut cluster: Option<(f64, f64, f64)> = None;
        for a in atoms {
            match cluster {
                Some((anchor, m, w)) if a.location - anchor <= COMPACTION_TOLERANCE => {
                    cluster = Some((anchor, m + a.mass, w + a.mass * (a.location - anchor)));
                }
                _ => {
                    if let Some((anchor, m, w)) = cluster {
                        out.push(Atom::new(anchor + w / m, m));
                    }
                    cluster = Some((a.location, a.mass, 0.0));
                }
            }
        }
        if let Some((anchor, m, w)) = cluster {
            out.push(Atom::new(anchor + w / m, m));
        }
        AtomicMeasure { atoms: out }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `<g, mu> = sum mass * g(location)`.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.mass * g(a.location)).sum()
    }

    /// `<1, mu>`.
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    /// `<x, mu>`.
    pub fn workload(&self) -> f64 {
        self.integrate(|x| x)
    }

    pub fn scale_mass(&self, factor: f64) -> Result<Self, MeasureError> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(MeasureError::BadFactor(factor));
        }
        Ok(AtomicMeasure {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom::new(a.location, a.mass * factor))
                .collect(),
        })
    }

    /// Drops atoms at or below `eps` in location.
    pub fn prune(&self, eps: f64) -> Result<Self, MeasureError> {
        if !(eps >= 0.0) {
            return Err(MeasureError::BadThreshold(eps));
        }
        Ok(AtomicMeasure {
            atoms: self
                .atoms
                .iter()
                .filter(|a| a.location > eps && a.mass > 0.0)
                .copied()
                .collect(),
        })
    }

    /// Sum of two measures.
    pub fn add(&self, other: &AtomicMeasure) -> AtomicMeasure {
        let mut atoms = Vec::with_capacity(self.len() + other.len());
        atoms.extend_from_slice(&self.atoms);
        atoms.extend_from_slice(&other.atoms);
        Self::from_valid(atoms)
    }
}

/// Free function form of [`AtomicMeasure::integrate`] taking a [`PairingFunction`].
pub fn integrate(g: &PairingFunction, mu: &AtomicMeasure) -> f64 {
    mu.integrate(|x| g.value(x))
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A real function on the half-line together with its derivative and sup bounds.
#[derive(Clone)]
pub struct PairingFunction {
    name: String,
    value: RealFn,
    derivative: RealFn,
    sup_bound: f64,
    derivative_sup_bound: f64,
}

impl fmt::Debug for PairingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PairingFunction")
            .field("name", &self.name)
            .field("sup_bound", &self.sup_bound)
            .field("derivative_sup_bound", &self.derivative_sup_bound)
            .finish()
    }
}

impl PairingFunction {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sup_bound: f64,
        derivative_sup_bound: f64,
    ) -> Self {
        PairingFunction {
            name: name.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            sup_bound,
            derivative_sup_bound,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        (self.derivative)(x)
    }

    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn derivative_sup_bound(&self) -> f64 {
        self.derivative_sup_bound
    }

    /// Largest violation of the declared bounds over `grid`; `None` if none.
    pub fn bound_violation(&self, grid: impl IntoIterator<Item = f64>) -> Option<(f64, String)> {
        let slack = 1e-12;
        for x in grid {
            let v = self.value(x);
            if !v.is_finite() || v.abs() > self.sup_bound + slack {
                return Some((
                    x,
                    format!("|g({x})| = {} exceeds {}", v.abs(), self.sup_bound),
                ));
            }
            let d = self.derivative(x);
            if !d.is_finite() || d.abs() > self.derivative_sup_bound + slack {
                return Some((
                    x,
                    format!(
                        "|g'({x})| = {} exceeds {}",
                        d.abs(),
                        self.derivative_sup_bound
                    ),
                ));
            }
        }
        None
    }
}

/// Bounded-Lipschitz distance between two atomic measures.
///
/// The supremum runs over `f` with `|f| <= 1` and Lipschitz constant at most 1.
/// For atomic measures an optimal `f` is piecewise linear with kinks on the
/// merged support `x_1 < ... < x_n`, so the problem is the chain program
///
/// ```text
/// maximize  sum_j s_j f_j
/// s.t.      |f_j| <= 1,   |f_{j+1} - f_j| <= x_{j+1} - x_j
/// ```
///
/// with `s_j` the signed mass difference at `x_j`. It is solved by dynamic
/// programming over the concave value function of the last kink value.
pub fn bl_distance(mu: &AtomicMeasure, nu: &AtomicMeasure) -> f64 {
    let signed = signed_difference(mu, nu);
    let mut chain = ConcaveChain::zero();
    let mut prev: Option<f64> = None;
    for &(x, s) in &signed {
        if let Some(p) = prev {
            chain.widen(x - p);
        }
        chain.add_linear(s);
        prev = Some(x);
    }
    chain.peak_value.max(0.0)
}

/// Merged support with signed masses `mu - nu`; zero differences dropped.
fn signed_difference(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Vec<(f64, f64)> {
    let mut raw: Vec<(f64, f64)> = mu
        .atoms
        .iter()
        .map(|a| (a.location, a.mass))
        .chain(nu.atoms.iter().map(|a| (a.location, -a.mass)))
        .collect();
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
    for (x, s) in raw {
        match out.last_mut() {
            Some(last) if x - last.0 <= COMPACTION_TOLERANCE => last.1 += s,
            _ => out.push((x, s)),
        }
    }
    out.retain(|&(_, s)| s != 0.0);
    out
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    len: f64,
    // Effective slope is `slope + ConcaveChain::offset`.
    slope: f64,
}

/// Concave piecewise-linear function on `[-1, 1]`, stored as segments on either
/// side of its maximizer. Adding a linear term is lazy through `offset`.
#[derive(Debug)]
struct ConcaveChain {
    // Front is adjacent to the peak; effective slopes are positive.
    left: VecDeque<Segment>,
    // Front is adjacent to the peak; effective slopes are nonpositive.
    right: VecDeque<Segment>,
    peak_x: f64,
    peak_value: f64,
    offset: f64,
}

impl ConcaveChain {
    fn zero() -> Self {
        let mut right = VecDeque::new();
        right.push_back(Segment {
            len: 2.0,
            slope: 0.0,
        });
        ConcaveChain {
            left: VecDeque::new(),
            right,
            peak_x: -1.0,
            peak_value: 0.0,
            offset: 0.0,
        }
    }

    /// `V(f) <- V(f) + s * f`.
    fn add_linear(&mut self, s: f64) {
        self.peak_value += s * self.peak_x;
        self.offset += s;
        while let Some(seg) = self.right.front().copied() {
            let eff = seg.slope + self.offset;
            if eff <= 0.0 {
                break;
            }
            self.right.pop_front();
            self.peak_value += eff * seg.len;
            self.peak_x += seg.len;
            self.left.push_front(seg);
        }
        while let Some(seg) = self.left.front().copied() {
            let eff = seg.slope + self.offset;
            if eff >= 0.0 {
                break;
            }
            self.left.pop_front();
            self.peak_value -= eff * seg.len;
            self.peak_x -= seg.len;
            self.right.push_front(seg);
        }
    }

    /// `V(g) <- max { V(f) : |f - g| <= d, |f| <= 1 }`.
    fn widen(&mut self, d: f64) {
        if d <= 0.0 {
            return;
        }
        self.right.push_front(Segment {
            len: 2.0 * d,
            slope: -self.offset,
        });
        self.peak_x -= d;
        self.clip_left(d);
        self.clip_right(d);
    }

    fn clip_left(&mut self, mut excess: f64) {
        while excess > 0.0 {
            if let Some(back) = self.left.back_mut() {
                let cut = back.len.min(excess);
                back.len -= cut;
                excess -= cut;
                if back.len <= 0.0 {
                    self.left.pop_back();
                }
            } else if let Some(front) = self.right.front_mut() {
                let cut = front.len.min(excess);
                self.peak_value += (front.slope + self.offset) * cut;
                self.peak_x += cut;
                front.len -= cut;
                excess -= cut;
                if front.len <= 0.0 {
                    self.right.pop_front();
                }
            } else {
                break;
            }
        }
    }

    fn clip_right(&mut self, mut excess: f64) {
        while excess > 0.0 {
            if let Some(back) = self.right.back_mut() {
                let cut = back.len.min(excess);
                back.len -= cut;
                excess -= cut;
                if back.len <= 0.0 {
                    self.right.pop_back();
                }
            } else if let Some(front) = self.left.front_mut() {
                let cut = front.len.min(excess);
                self.peak_value -= (front.slope + self.offset) * cut;
                self.peak_x -= cut;
                front.len -= cut;
                excess -= cut;
                if front.len <= 0.0 {
                    self.left.pop_front();
                }
            } else {
                break;
            }
        }
    }
}

/// Measures on a uniform time grid `start + k * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidPath {
    start: f64,
    step: f64,
    measures: Vec<AtomicMeasure>,
}

impl FluidPath {
    /// Panics if `measures` is empty or `step` is negative.
    pub fn new(start: f64, step: f64, measures: Vec<AtomicMeasure>) -> Self {
        assert!(!measures.is_empty(), "a path holds at least one measure");
        assert!(step >= 0.0 && step.is_finite());
        FluidPath {
            start,
            step,
            measures,
        }
    }

    /// Path holding `measure` at each of `steps + 1` grid times.
    pub fn constant(start: f64, step: f64, steps: usize, measure: &AtomicMeasure) -> Self {
        Self::new(start, step, vec![measure.clone(); steps + 1])
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    /// Number of grid steps (`len - 1`).
    pub fn steps(&self) -> usize {
        self.measures.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.steps())
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |k| self.time(k))
    }

    pub fn measures(&self) -> &[AtomicMeasure] {
        &self.measures
    }

    pub fn measure(&self, k: usize) -> &AtomicMeasure {
        &self.measures[k]
    }

    pub fn first(&self) -> &AtomicMeasure {
        &self.measures[0]
    }

    pub fn last(&self) -> &AtomicMeasure {
        &self.measures[self.measures.len() - 1]
    }

    pub fn into_measures(self) -> Vec<AtomicMeasure> {
        self.measures
    }

    /// Grid index of time `t`, if `t` lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        if self.step == 0.0 {
            return ((t - self.start).abs() <= 1e-12).then_some(0);
        }
        let k = ((t - self.start) / self.step).round();
        if k < 0.0 || k as usize >= self.len() {
            return None;
        }
        let k = k as usize;
        ((self.time(k) - t).abs() <= 1e-9 * t.abs().max(1.0)).then_some(k)
    }
}

/// `sup_k |a(t_k) - b(t_k)|_BL` over a shared grid.
pub fn path_distance(a: &FluidPath, b: &FluidPath) -> Result<f64, MeasureError> {
    if a.len() != b.len() {
        return Err(MeasureError::GridMismatch(format!(
            "{} vs {} grid points",
            a.len(),
            b.len()
        )));
    }
    let tol = 1e-12 * a.start.abs().max(1.0);
    if (a.start - b.start).abs() > tol || (a.len() > 1 && (a.step - b.step).abs() > 1e-12 * a.step)
    {
        return Err(MeasureError::GridMismatch(format!(
            "start/step ({}, {}) vs ({}, {})",
            a.start, a.step, b.start, b.step
        )));
    }
    Ok(a.measures
        .iter()
        .zip(&b.measures)
        .map(|(x, y)| bl_distance(x, y))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(p: &[(f64, f64)]) -> AtomicMeasure {
        AtomicMeasure::from_pairs(p).unwrap()
    }

    #[test]
    fn integrate_examples() {
        let g = |x: f64| 1.0 - (-x * x).exp();
        assert_eq!(m(&[(0.0, 1.0)]).integrate(g), 0.0);
        assert_eq!(m(&[(2.0, 1.0), (6.0, 1.0)]).integrate(|x| x), 8.0);
        assert_eq!(m(&[(2.0, 1.0)]).integrate(|x| x * x), 4.0);
        let p = PairingFunction::new("id", |x| x, |_| 1.0, f64::INFINITY, 1.0);
        assert_eq!(integrate(&p, &AtomicMeasure::empty()), 0.0);
    }

    #[test]
    fn mass_and_workload() {
        let e = AtomicMeasure::empty();
        assert_eq!((e.total_mass(), e.workload()), (0.0, 0.0));
        let a = m(&[(1.5, 2.0)]);
        assert_eq!((a.total_mass(), a.workload()), (2.0, 3.0));
        let b = m(&[(2.0, 1.0), (6.0, 1.0)]);
        assert_eq!((b.total_mass(), b.workload()), (2.0, 8.0));
    }

    #[test]
    fn scaling() {
        assert_eq!(m(&[(1.0, 10.0)]).scale_mass(0.1).unwrap(), m(&[(1.0, 1.0)]));
        assert!(AtomicMeasure::empty().scale_mass(3.0).unwrap().is_empty());
        assert_eq!(
            m(&[(2.0, 1.0), (6.0, 1.0)]).scale_mass(0.5).unwrap(),
            m(&[(2.0, 0.5), (6.0, 0.5)])
        );
        assert!(matches!(
            m(&[(1.0, 1.0)]).scale_mass(0.0),
            Err(MeasureError::BadFactor(_))
        ));
        assert!(m(&[(1.0, 1.0)]).scale_mass(-2.0).is_err());
    }

    #[test]
    fn pruning() {
        assert_eq!(
            m(&[(0.0, 1.0), (1.2, 1.0)]).prune(0.0).unwrap(),
            m(&[(1.2, 1.0)])
        );
        assert_eq!(
            m(&[(1e-12, 1.0), (3.0, 1.0)]).prune(1e-9).unwrap(),
            m(&[(3.0, 1.0)])
        );
        assert_eq!(m(&[(3.0, 1.0)]).prune(1e-9).unwrap(), m(&[(3.0, 1.0)]));
        assert!(m(&[(3.0, 1.0)]).prune(-1.0).is_err());
    }

    #[test]
    fn construction_rejects_bad_atoms() {
        assert!(AtomicMeasure::from_pairs(&[(-1.0, 1.0)]).is_err());
        assert!(AtomicMeasure::from_pairs(&[(1.0, -1.0)]).is_err());
        assert!(AtomicMeasure::from_pairs(&[(f64::NAN, 1.0)]).is_err());
        assert!(AtomicMeasure::from_pairs(&[(1.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn compaction_merges_close_atoms() {
        let a = m(&[(1.0, 1.0), (1.0 + 5e-13, 2.0), (2.0, 1.0), (0.5, 0.0)]);
        assert_eq!(a.len(), 2);
        assert_eq!(a.atoms()[0].mass, 3.0);
        assert!((a.total_mass() - 4.0).abs() < 1e-15);
        assert!(a.atoms().windows(2).all(|w| w[0].location < w[1].location));
    }

    #[test]
    fn bl_examples() {
        assert_eq!(bl_distance(&m(&[(0.7, 1.0)]), &m(&[(0.7, 1.0)])), 0.0);
        assert!((bl_distance(&m(&[(1.0, 1.0)]), &m(&[(1.5, 1.0)])) - 0.5).abs() < 1e-15);
        assert!((bl_distance(&m(&[(1.0, 1.0)]), &m(&[(1.0, 2.0)])) - 1.0).abs() < 1e-15);
        // far-apart atoms saturate at 2 per unit mass
        assert!((bl_distance(&m(&[(0.0, 1.0)]), &m(&[(10.0, 1.0)])) - 2.0).abs() < 1e-15);
        assert_eq!(
            bl_distance(&AtomicMeasure::empty(), &AtomicMeasure::empty()),
            0.0
        );
        assert!((bl_distance(&m(&[(4.0, 0.3)]), &AtomicMeasure::empty()) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn path_distance_examples() {
        let a = m(&[(1.0, 1.0)]);
        let b = m(&[(2.0, 1.0)]);
        let pa = FluidPath::constant(0.0, 0.1, 4, &a);
        assert_eq!(path_distance(&pa, &pa).unwrap(), 0.0);
        let pb = FluidPath::constant(0.0, 0.1, 4, &b);
        assert!((path_distance(&pa, &pb).unwrap() - 1.0).abs() < 1e-15);

        let mut ms = vec![a.clone(); 5];
        ms[3] = m(&[(1.3, 1.0)]);
        let pc = FluidPath::new(0.0, 0.1, ms);
        assert!((path_distance(&pa, &pc).unwrap() - 0.3).abs() < 1e-12);

        let short = FluidPath::constant(0.0, 0.1, 3, &a);
        assert!(matches!(
            path_distance(&pa, &short),
            Err(MeasureError::GridMismatch(_))
        ));
        let shifted = FluidPath::constant(0.5, 0.1, 4, &a);
        assert!(path_distance(&pa, &shifted).is_err());
    }

    #[test]
    fn grid_lookup() {
        let p = FluidPath::constant(0.0, 0.01, 100, &AtomicMeasure::empty());
        assert_eq!(p.index_of(0.5), Some(50));
        assert_eq!(p.index_of(1.0), Some(100));
        assert_eq!(p.index_of(0.505), None);
        assert_eq!(p.index_of(1.5), None);
    }
}
