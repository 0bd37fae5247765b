//! Concrete Banach spaces that host vector measures and integrands.
//!
//! Four spaces are supported:
//!
//! | kind             | coordinates           | norm                        |
//! |------------------|-----------------------|-----------------------------|
//! | `Real`           | 1                     | absolute value              |
//! | `FiniteDim(n)`   | n                     | Euclidean                   |
//! | `GridFunction`   | K+1 grid samples      | sup over the grid points    |
//! | `SampleFunction` | M sample slots        | mean of absolute values     |
//!
//! `GridFunction` stands in for `C([0,T])` and `SampleFunction` for `L¹(Ω)`
//! under the empirical measure with weight `1/M` per slot. The sup over grid
//! points is only a surrogate for the true sup norm of a continuous function.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly increasing time grid `0 = t_0 < ... < t_K = T`.
#[derive(Clone, PartialEq)]
pub struct TimeGrid {
    points: Arc<[f64]>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(
                "a time grid needs at least two points".into(),
            ));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time grid must start at 0, got {}",
                points[0]
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(
                "time grid has non-finite points".into(),
            ));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "time grid must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            points: points.into(),
        })
    }

    /// `steps + 1` equally spaced points on `[0, horizon]`.
    pub fn uniform(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "grid needs at least one step".into(),
            ));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        let h = horizon / steps as f64;
        let mut pts: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
        pts[steps] = horizon;
        Self::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn time(&self, index: usize) -> f64 {
        self.points[index]
    }

    /// Index of the grid point equal to `t` (to within `1e-12 * max(1, T)`).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let slack = 1e-12 * self.horizon().max(1.0);
        let pos = self.points.partition_point(|&p| p < t - slack);
        (pos < self.points.len() && (self.points[pos] - t).abs() <= slack).then_some(pos)
    }

    /// Trapezoidal quadrature weights on the sub-grid `[a, b]` (indices inclusive).
    pub fn trapezoid_weights(&self, a: usize, b: usize) -> Vec<f64> {
        let mut w = vec![0.0; b + 1 - a];
        for k in a..b {
            let h = self.points[k + 1] - self.points[k];
            w[k - a] += 0.5 * h;
            w[k + 1 - a] += 0.5 * h;
        }
        w
    }

    fn same_as(&self, other: &TimeGrid) -> bool {
        Arc::ptr_eq(&self.points, &other.points) || self.points == other.points
    }
}

impl fmt::Debug for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TimeGrid({} points on [0, {}])",
            self.points.len(),
            self.horizon()
        )
    }
}

#[derive(Clone, Debug)]
pub enum SpaceDescriptor {
    Real,
    FiniteDim(usize),
    GridFunction(TimeGrid),
    SampleFunction(usize),
}

impl PartialEq for SpaceDescriptor {
    fn eq(&self, other: &Self) -> bool {
        use SpaceDescriptor::*;
        match (self, other) {
            (Real, Real) => true,
            (FiniteDim(a), FiniteDim(b)) => a == b,
            (GridFunction(a), GridFunction(b)) => a.same_as(b),
            (SampleFunction(a), SampleFunction(b)) => a == b,
            _ => false,
        }
    }
}

impl SpaceDescriptor {
    pub fn finite_dim(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "dimension must be at least 1".into(),
            ));
        }
        Ok(Self::FiniteDim(n))
    }

    pub fn sample_function(slots: usize) -> Result<Self> {
        if slots == 0 {
            return Err(Error::InvalidArgument(
                "sample function space needs at least one slot".into(),
            ));
        }
        Ok(Self::SampleFunction(slots))
    }

    /// Number of stored coordinates.
    pub fn dim(&self) -> usize {
        match self {
            SpaceDescriptor::Real => 1,
            SpaceDescriptor::FiniteDim(n) => *n,
            SpaceDescriptor::GridFunction(g) => g.len(),
            SpaceDescriptor::SampleFunction(m) => *m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SpaceDescriptor::Real => "Real",
            SpaceDescriptor::FiniteDim(_) => "FiniteDim",
            SpaceDescriptor::GridFunction(_) => "GridFunction",
            SpaceDescriptor::SampleFunction(_) => "SampleFunction",
        }
    }

    /// Space norm applied to a raw coordinate slice.
    pub fn norm_of(&self, coords: &[f64]) -> f64 {
        debug_assert_eq!(coords.len(), self.dim());
        match self {
            SpaceDescriptor::Real => coords[0].abs(),
            SpaceDescriptor::FiniteDim(_) => coords.iter().map(|c| c * c).sum::<f64>().sqrt(),
            SpaceDescriptor::GridFunction(_) => coords.iter().fold(0.0, |m, c| m.max(c.abs())),
            SpaceDescriptor::SampleFunction(m) => {
                coords.iter().map(|c| c.abs()).sum::<f64>() / *m as f64
            }
        }
    }

    /// `‖a − b‖` on raw coordinate slices.
    pub fn distance_of(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self {
            SpaceDescriptor::Real => (a[0] - b[0]).abs(),
            SpaceDescriptor::FiniteDim(_) => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            SpaceDescriptor::GridFunction(_) => diffs.fold(0.0, |m, d| m.max(d.abs())),
            SpaceDescriptor::SampleFunction(m) => diffs.map(f64::abs).sum::<f64>() / *m as f64,
        }
    }

    pub fn zero(&self) -> BanachValue {
        BanachValue {
            space: self.clone(),
            coords: vec![0.0; self.dim()],
        }
    }

    pub fn check_same(&self, other: &SpaceDescriptor) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpaceMismatch(format!(
                "{}[{}] vs {}[{}]",
                self.name(),
                self.dim(),
                other.name(),
                other.dim()
            )))
        }
    }
}

/// An element of one of the concrete Banach spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct BanachValue {
    space: SpaceDescriptor,
    coords: Vec<f64>,
}

impl BanachValue {
    pub fn new(space: SpaceDescriptor, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != space.dim() {
            return Err(Error::SpaceMismatch(format!(
                "{} expects {} coordinates, got {}",
                space.name(),
                space.dim(),
                coords.len()
            )));
        }
        Ok(Self { space, coords })
    }

    pub fn real(x: f64) -> Self {
        Self {
            space: SpaceDescriptor::Real,
            coords: vec![x],
        }
    }

    pub fn vector(coords: Vec<f64>) -> Result<Self> {
        let space = SpaceDescriptor::finite_dim(coords.len())?;
        Ok(Self { space, coords })
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn add(&self, other: &BanachValue) -> Result<BanachValue> {
        self.space.check_same(&other.space)?;
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            space: self.space.clone(),
            coords,
        })
    }

    pub fn sub(&self, other: &BanachValue) -> Result<BanachValue> {
        self.space.check_same(&other.space)?;
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            space: self.space.clone(),
            coords,
        })
    }

    pub fn scale(&self, a: f64) -> BanachValue {
        Self {
            space: self.space.clone(),
            coords: self.coords.iter().map(|c| a * c).collect(),
        }
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &BanachValue) -> Result<()> {
        self.space.check_same(&other.space)?;
        for (x, y) in self.coords.iter_mut().zip(&other.coords) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.space.norm_of(&self.coords)
    }

    pub fn is_zero(&self) -> bool {
        self.coords.iter().all(|&c| c == 0.0)
    }

    pub fn distance(&self, other: &BanachValue) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

/// The probe families that act as dual functionals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Probe {
    Identity,
    Coordinate(usize),
    GridEvaluation(usize),
    WeightedAverage(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualFunctional {
    space: SpaceDescriptor,
    probe: Probe,
}

impl DualFunctional {
    pub fn new(space: SpaceDescriptor, probe: Probe) -> Result<Self> {
        let ok = match (&space, &probe) {
            (SpaceDescriptor::Real, Probe::Identity) => true,
            (SpaceDescriptor::FiniteDim(n), Probe::Coordinate(i)) => i < n,
            (SpaceDescriptor::GridFunction(g), Probe::GridEvaluation(i)) => *i < g.len(),
            (SpaceDescriptor::SampleFunction(m), Probe::WeightedAverage(a)) => {
                a.len() == *m && a.iter().all(|x| x.is_finite())
            }
            _ => false,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "probe {probe:?} is not valid on {}[{}]",
                space.name(),
                space.dim()
            )));
        }
        Ok(Self { space, probe })
    }

    /// Identity, first coordinate, evaluation at `t_0`, or the plain mean
    /// over sample slots.
    pub fn default_for(space: &SpaceDescriptor) -> Self {
        let probe = match space {
            SpaceDescriptor::Real => Probe::Identity,
            SpaceDescriptor::FiniteDim(_) => Probe::Coordinate(0),
            SpaceDescriptor::GridFunction(_) => Probe::GridEvaluation(0),
            SpaceDescriptor::SampleFunction(m) => Probe::WeightedAverage(vec![1.0 / *m as f64; *m]),
        };
        Self {
            space: space.clone(),
            probe,
        }
    }

    /// A family of probes that separates points of the space: every
    /// coordinate evaluation (slot indicators for sample functions).
    pub fn norming_family(space: &SpaceDescriptor) -> Vec<Self> {
        let n = space.dim();
        (0..n)
            .map(|i| {
                let probe = match space {
                    SpaceDescriptor::Real => Probe::Identity,
                    SpaceDescriptor::FiniteDim(_) => Probe::Coordinate(i),
                    SpaceDescriptor::GridFunction(_) => Probe::GridEvaluation(i),
                    SpaceDescriptor::SampleFunction(_) => {
                        let mut a = vec![0.0; n];
                        a[i] = 1.0;
                        Probe::WeightedAverage(a)
                    }
                };
                Self {
                    space: space.clone(),
                    probe,
                }
            })
            .collect()
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn probe(&self) -> &Probe {
        &self.probe
    }

    pub fn pair(&self, v: &BanachValue) -> Result<f64> {
        self.space.check_same(&v.space)?;
        Ok(self.pair_coords(&v.coords))
    }

    /// Pairing against a raw coordinate slice of this functional's space.
    pub fn pair_coords(&self, coords: &[f64]) -> f64 {
        match &self.probe {
            Probe::Identity => coords[0],
            Probe::Coordinate(i) | Probe::GridEvaluation(i) => coords[*i],
            Probe::WeightedAverage(a) => a.iter().zip(coords).map(|(x, y)| x * y).sum(),
        }
    }

    /// Operator-norm bound `C` with `|pair(v)| <= C * norm(v)`.
    pub fn bound(&self) -> f64 {
        match &self.probe {
            Probe::Identity | Probe::Coordinate(_) | Probe::GridEvaluation(_) => 1.0,
            Probe::WeightedAverage(a) => {
                a.iter().fold(0.0_f64, |m, x| m.max(x.abs())) * a.len() as f64
            }
        }
    }
}
