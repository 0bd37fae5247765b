//! Stochastic integrals of deterministic Banach-valued integrands defined by
//! integration by parts,
//!
//! `(Bi₁*)∫_a^b Φ dw = Φ(b) w_b − Φ(a) w_a − (Bi₁)∫_a^b Φ'(r) w_r dr`,
//!
//! with the time integral taken against trapezoidal weights on the path grid,
//! and the change of drift for `C_t = ∫ Ψ ds + (Bi₁*)∫ Φ dw`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::banach::{BanachValue, DualFunctional, SpaceDescriptor, TimeGrid};
use crate::birkhoff::{bi1_integrate, BirkhoffResult};
use crate::conditioning::{martingale_test, BinnedStateFiltration, MartingaleReport};
use crate::error::{Error, Result};
use crate::girsanov::{change_measure, observation_times, PathEnsemble};
use crate::measure::{DiscreteMeasureSpace, VectorMeasure};
use crate::report::{Expectation, StageOutcome};

/// Tolerance of the derivative checks.
pub const TOL_FD: f64 = 1e-6;

/// Step of the central differences used to check a closed-form derivative.
const CHECK_STEP: f64 = 1e-5;

pub type PathFn = Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    FiniteDifference,
}

/// A deterministic path `Φ: [0,T] → X` with its derivative direction `Φ'`.
pub struct StochasticIntegrand {
    space: SpaceDescriptor,
    phi: PathFn,
    dphi: Option<PathFn>,
    provenance: Provenance,
    step: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct IntegrandCheck {
    /// `max ‖(Φ(t+h) − Φ(t−h))/2h − Φ'(t)‖` over interior grid points.
    pub derivative_gap: f64,
    /// Same check through each probe, maximized over probes.
    pub duality_gap: f64,
    pub step: f64,
}

impl StochasticIntegrand {
    pub fn closed_form(space: SpaceDescriptor, phi: PathFn, dphi: PathFn) -> Self {
        Self {
            space,
            phi,
            dphi: Some(dphi),
            provenance: Provenance::ClosedForm,
            step: CHECK_STEP,
        }
    }

    /// `Φ'(t) = (Φ(t+h) − Φ(t−h)) / 2h`; `h` is normally the grid step.
    pub fn finite_difference(space: SpaceDescriptor, phi: PathFn, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "difference step must be positive, got {step}"
            )));
        }
        Ok(Self {
            space,
            phi,
            dphi: None,
            provenance: Provenance::FiniteDifference,
            step,
        })
    }

    /// `Φ(t) = x₀` for every `t`.
    pub fn constant(x0: BanachValue) -> Self {
        let space = x0.space().clone();
        let c = x0.into_coords();
        let zero = vec![0.0; c.len()];
        Self::closed_form(
            space,
            Box::new(move |_| c.clone()),
            Box::new(move |_| zero.clone()),
        )
    }

    /// `Φ(t) = r(t) x₀` with `Φ'(t) = r'(t) x₀`.
    pub fn scaled(
        x0: BanachValue,
        r: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dr: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let space = x0.space().clone();
        let c = x0.into_coords();
        let c2 = c.clone();
        Self::closed_form(
            space,
            Box::new(move |t| c.iter().map(|x| r(t) * x).collect()),
            Box::new(move |t| c2.iter().map(|x| dr(t) * x).collect()),
        )
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    fn phi_coords(&self, t: f64) -> Vec<f64> {
        (self.phi)(t)
    }

    fn dphi_coords(&self, t: f64) -> Vec<f64> {
        match &self.dphi {
            Some(d) => d(t),
            None => {
                let h = self.step;
                let a = (self.phi)(t + h);
                let b = (self.phi)(t - h);
                a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
            }
        }
    }

    pub fn value(&self, t: f64) -> Result<BanachValue> {
        BanachValue::new(self.space.clone(), self.phi_coords(t))
    }

    pub fn derivative(&self, t: f64) -> Result<BanachValue> {
        BanachValue::new(self.space.clone(), self.dphi_coords(t))
    }

    /// Checks `Φ'` against central differences at every interior grid point,
    /// in norm and through each probe. Closed forms are checked with a small
    /// step, finite-difference derivatives with their own step.
    pub fn validate(
        &self,
        grid: &TimeGrid,
        probes: &[DualFunctional],
        tol: f64,
    ) -> Result<IntegrandCheck> {
        for f in probes {
            f.space().check_same(&self.space)?;
        }
        let h = self.step;
        let mut derivative_gap = 0.0_f64;
        let mut duality_gap = 0.0_f64;
        for &t in &grid.points()[1..grid.len() - 1] {
            let hi = BanachValue::new(self.space.clone(), self.phi_coords(t + h))?;
            let lo = BanachValue::new(self.space.clone(), self.phi_coords(t - h))?;
            let d = self.derivative(t)?;
            let fd = hi.sub(&lo)?.scale(1.0 / (2.0 * h));
            derivative_gap = derivative_gap.max(fd.distance(&d)?);
            for f in probes {
                let scalar_fd = (f.pair(&hi)? - f.pair(&lo)?) / (2.0 * h);
                duality_gap = duality_gap.max((scalar_fd - f.pair(&d)?).abs());
            }
        }
        if derivative_gap > tol || duality_gap > tol {
            return Err(Error::Precondition(format!(
                "derivative check failed: norm gap {derivative_gap:e}, probe gap {duality_gap:e}, tolerance {tol:e}"
            )));
        }
        Ok(IntegrandCheck {
            derivative_gap,
            duality_gap,
            step: h,
        })
    }

    pub fn sample(&self, grid: &TimeGrid) -> Result<SampledIntegrand> {
        let d = self.space.dim();
        let mut phi = Vec::with_capacity(grid.len() * d);
        let mut dphi = Vec::with_capacity(grid.len() * d);
        for &t in grid.points() {
            let v = self.phi_coords(t);
            let dv = self.dphi_coords(t);
            if v.len() != d || dv.len() != d {
                return Err(Error::SpaceMismatch(format!(
                    "integrand returned {} / {} coordinates, space has {d}",
                    v.len(),
                    dv.len()
                )));
            }
            phi.extend(v);
            dphi.extend(dv);
        }
        Ok(SampledIntegrand {
            grid: grid.clone(),
            space: self.space.clone(),
            dim: d,
            phi,
            dphi,
        })
    }
}

/// `Φ` and `Φ'` sampled on a grid, row-major `(K+1) × d`.
#[derive(Clone, Debug)]
pub struct SampledIntegrand {
    grid: TimeGrid,
    space: SpaceDescriptor,
    dim: usize,
    phi: Vec<f64>,
    dphi: Vec<f64>,
}

impl SampledIntegrand {
    /// Samples of a scalar integrand and its derivative.
    pub fn scalar(grid: &TimeGrid, phi: Vec<f64>, dphi: Vec<f64>) -> Result<Self> {
        if phi.len() != grid.len() || dphi.len() != grid.len() {
            return Err(Error::SpaceMismatch("samples do not match the grid".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            space: SpaceDescriptor::Real,
            dim: 1,
            phi,
            dphi,
        })
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn phi_row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.dim..(k + 1) * self.dim]
    }

    fn dphi_row(&self, k: usize) -> &[f64] {
        &self.dphi[k * self.dim..(k + 1) * self.dim]
    }

    /// The integrand seen through a probe.
    pub fn paired(&self, f: &DualFunctional) -> Result<SampledIntegrand> {
        f.space().check_same(&self.space)?;
        let n = self.grid.len();
        let phi = (0..n).map(|k| f.pair_coords(self.phi_row(k))).collect();
        let dphi = (0..n).map(|k| f.pair_coords(self.dphi_row(k))).collect();
        Self::scalar(&self.grid, phi, dphi)
    }

    fn check_path(&self, path: &[f64]) -> Result<()> {
        if path.len() != self.grid.len() {
            return Err(Error::SpaceMismatch(format!(
                "path of length {} on a grid of {} points",
                path.len(),
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// By-parts integral over grid indices `[a, b]` as raw coordinates.
    pub fn by_parts(&self, path: &[f64], a: usize, b: usize) -> Result<Vec<f64>> {
        self.check_path(path)?;
        if a > b || b >= self.grid.len() {
            return Err(Error::InvalidArgument(format!(
                "bad index range [{a}, {b}]"
            )));
        }
        let mut out = vec![0.0; self.dim];
        if a == b {
            return Ok(out);
        }
        let w = self.grid.trapezoid_weights(a, b);
        for (c, o) in out.iter_mut().enumerate() {
            let mut time_integral = 0.0;
            for (i, k) in (a..=b).enumerate() {
                time_integral += w[i] * self.dphi_row(k)[c] * path[k];
            }
            *o = self.phi_row(b)[c] * path[b] - self.phi_row(a)[c] * path[a] - time_integral;
        }
        Ok(out)
    }

    /// `A_k = (Bi₁*)∫_0^{t_k} Φ dw` for every grid index, row-major
    /// `(K+1) × d`.
    pub fn cumulative(&self, path: &[f64]) -> Result<Vec<f64>> {
        self.check_path(path)?;
        let d = self.dim;
        let pts = self.grid.points();
        let mut out = vec![0.0; pts.len() * d];
        let mut time_integral = vec![0.0; d];
        for k in 1..pts.len() {
            let h = 0.5 * (pts[k] - pts[k - 1]);
            for c in 0..d {
                time_integral[c] +=
                    h * (self.dphi_row(k - 1)[c] * path[k - 1] + self.dphi_row(k)[c] * path[k]);
                out[k * d + c] =
                    self.phi_row(k)[c] * path[k] - self.phi_row(0)[c] * path[0] - time_integral[c];
            }
        }
        Ok(out)
    }

    /// `(Bi₁)∫_a^b Φ(r) dr` with the same trapezoidal weights.
    pub fn time_integral(&self, a: usize, b: usize, scale: &[f64]) -> Vec<f64> {
        let w = self.grid.trapezoid_weights(a, b);
        let mut out = vec![0.0; self.dim];
        for (i, k) in (a..=b).enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w[i] * scale[k] * self.phi_row(k)[c];
            }
        }
        out
    }
}

fn grid_index(grid: &TimeGrid, t: f64) -> Result<usize> {
    grid.index_of(t)
        .ok_or_else(|| Error::InvalidArgument(format!("time {t} is not a grid point")))
}

#[derive(Clone, Debug)]
pub struct Bi1StarValue {
    pub value: BanachValue,
    /// Certificate of the time integral `(Bi₁)∫ Φ' w dr`.
    pub time_integral: BirkhoffResult,
}

/// `(Bi₁*)∫_a^b Φ dw` on one path. The time integral is a first-type
/// Birkhoff integral over the grid points of `[a, b]` carrying trapezoidal
/// weights, refined until its oscillation bound is at most `tol`.
pub fn bi1star_integral(
    integrand: &StochasticIntegrand,
    grid: &TimeGrid,
    path: &[f64],
    a: f64,
    b: f64,
    tol: f64,
) -> Result<Bi1StarValue> {
    if path.len() != grid.len() {
        return Err(Error::SpaceMismatch(format!(
            "path of length {} on a grid of {} points",
            path.len(),
            grid.len()
        )));
    }
    let (ia, ib) = (grid_index(grid, a)?, grid_index(grid, b)?);
    if ia > ib {
        return Err(Error::InvalidArgument(format!("a = {a} exceeds b = {b}")));
    }
    let space = integrand.space().clone();
    if ia == ib {
        let zero = space.zero();
        let weights = Arc::new(DiscreteMeasureSpace::new(vec![1.0])?);
        let time_integral = bi1_integrate(std::slice::from_ref(&zero), &weights, tol)?;
        return Ok(Bi1StarValue {
            value: zero,
            time_integral,
        });
    }
    let weights = DiscreteMeasureSpace::new(grid.trapezoid_weights(ia, ib))?;
    let values = (ia..=ib)
        .map(|k| Ok(integrand.derivative(grid.time(k))?.scale(path[k])))
        .collect::<Result<Vec<_>>>()?;
    let time_integral = bi1_integrate(&values, &weights, tol)?;
    let value = integrand
        .value(grid.time(ib))?
        .scale(path[ib])
        .sub(&integrand.value(grid.time(ia))?.scale(path[ia]))?
        .sub(&time_integral.value)?;
    Ok(Bi1StarValue {
        value,
        time_integral,
    })
}

/// `Σ_i h(t_i)(w_{i+1} − w_i)`, the left-point Itô sum over the whole grid.
pub fn ito_sum_oracle(h: &[f64], path: &[f64]) -> Result<f64> {
    if h.len() != path.len() || path.is_empty() {
        return Err(Error::SpaceMismatch(
            "integrand and path lengths differ".into(),
        ));
    }
    Ok(path.windows(2).zip(h).map(|(w, r)| r * (w[1] - w[0])).sum())
}

/// `max |pair(f, (Bi₁*)∫Φ dw) − (Bi₁*)∫ pair(f, Φ) dw|` over paths and probes,
/// on the full grid.
pub fn check_weak_characterization(
    integrand: &SampledIntegrand,
    ensemble: &PathEnsemble,
    probes: &[DualFunctional],
) -> Result<f64> {
    let last = ensemble.grid().steps();
    let paired = probes
        .iter()
        .map(|f| integrand.paired(f))
        .collect::<Result<Vec<_>>>()?;
    let gaps = (0..ensemble.paths())
        .into_par_iter()
        .map(|p| -> Result<f64> {
            let path = ensemble.path(p);
            let v = integrand.by_parts(path, 0, last)?;
            let mut gap = 0.0_f64;
            for (f, s) in probes.iter().zip(&paired) {
                let rhs = s.by_parts(path, 0, last)?[0];
                gap = gap.max((f.pair_coords(&v) - rhs).abs());
            }
            Ok(gap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// Quantile bins of `w_t` at the observation times.
pub fn brownian_filtration(
    ensemble: &PathEnsemble,
    observations: usize,
    bins: usize,
) -> Result<BinnedStateFiltration<impl Fn(usize, usize) -> f64 + Sync + '_>> {
    let times = observation_times(ensemble.grid().steps(), observations);
    BinnedStateFiltration::new(times, ensemble.paths(), bins, move |k, a| {
        ensemble.value(a, k)
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeMartingale {
    pub probe: usize,
    pub report: MartingaleReport,
}

/// Martingale tests of `pair(f, X_t)` for each probe, each at a Bonferroni
/// share of `confidence`. `series(i)` is the row-major `paths × (K+1)`
/// table of the `i`-th paired process.
fn probe_martingales<S>(
    probes: usize,
    series: S,
    measure: &VectorMeasure,
    ensemble: &PathEnsemble,
    observations: usize,
    bins: usize,
    confidence: f64,
) -> Result<Vec<ProbeMartingale>>
where
    S: Fn(usize) -> Vec<f64>,
{
    let filtration = brownian_filtration(ensemble, observations, bins)?;
    let share = 1.0 - (1.0 - confidence) / probes.max(1) as f64;
    let width = ensemble.grid().len();
    (0..probes)
        .map(|i| {
            let table = series(i);
            let report = martingale_test(|k, a| table[a * width + k], measure, &filtration, share)?;
            Ok(ProbeMartingale { probe: i, report })
        })
        .collect()
}

/// `A_t = (Bi₁*)∫_0^t Φ dw` under `P`, one martingale test per probe.
pub fn check_integral_martingale(
    integrand: &SampledIntegrand,
    ensemble: &PathEnsemble,
    probes: &[DualFunctional],
    observations: usize,
    bins: usize,
    confidence: f64,
) -> Result<Vec<ProbeMartingale>> {
    let paired = probes
        .iter()
        .map(|f| integrand.paired(f))
        .collect::<Result<Vec<_>>>()?;
    let p = VectorMeasure::scalar(ensemble.probability()?);
    probe_martingales(
        probes.len(),
        |i| cumulative_table(&paired[i], ensemble),
        &p,
        ensemble,
        observations,
        bins,
        confidence,
    )
}

fn cumulative_table(s: &SampledIntegrand, ensemble: &PathEnsemble) -> Vec<f64> {
    let width = ensemble.grid().len();
    let mut out = vec![0.0; ensemble.paths() * width];
    out.par_chunks_mut(width).enumerate().for_each(|(p, row)| {
        let c = s.cumulative(ensemble.path(p)).expect("path matches grid");
        row.copy_from_slice(&c);
    });
    out
}

/// `Ψ = rΦ` drift with diffusion `Φ`.
pub struct DriftedProcess {
    pub psi: PathFn,
    pub phi: StochasticIntegrand,
    pub r: Option<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl DriftedProcess {
    /// `max_t ‖Ψ(t) − r(t)Φ(t)‖` over the grid.
    pub fn factorization_residual(&self, grid: &TimeGrid) -> Result<f64> {
        let r = self.r.as_ref().ok_or_else(|| {
            Error::Precondition("the drift has no declared factorization Ψ = rΦ".into())
        })?;
        let space = self.phi.space();
        let mut worst = 0.0_f64;
        for &t in grid.points() {
            let psi = (self.psi)(t);
            let phi = self.phi.phi_coords(t);
            if psi.len() != space.dim() {
                return Err(Error::SpaceMismatch("drift has the wrong dimension".into()));
            }
            let diff: Vec<f64> = psi.iter().zip(&phi).map(|(a, b)| a - r(t) * b).collect();
            worst = worst.max(space.norm_of(&diff));
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug)]
pub struct DriftChangeConfig {
    pub confidence: f64,
    pub observations: usize,
    pub bins: usize,
    /// Probes for the martingale tests; the norming family when `None`.
    pub probes: Option<Vec<DualFunctional>>,
}

impl Default for DriftChangeConfig {
    fn default() -> Self {
        Self {
            confidence: 0.99,
            observations: 8,
            bins: 32,
            probes: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftChangeReport {
    pub stages: Vec<StageOutcome>,
    pub factorization_residual: f64,
    pub pettis_gap: f64,
    pub y_martingale: MartingaleReport,
    pub c_under_q: Vec<ProbeMartingale>,
    /// Absent when `r` vanishes on the grid and there is no drift to detect.
    pub c_under_p: Option<Vec<ProbeMartingale>>,
}

/// Tolerance of the factorization residual.
pub const FACTORIZATION_TOL: f64 = 1e-10;
/// Tolerance of the per-path identity `∫Φ dw̃ = ∫Φ dw + ∫ rΦ ds`.
pub const PETTIS_TOL: f64 = 1e-8;

fn worst_probe(name: &str, expected: Expectation, reports: &[ProbeMartingale]) -> StageOutcome {
    let worst = reports
        .iter()
        .max_by(|a, b| a.report.worst_ratio.total_cmp(&b.report.worst_ratio))
        .expect("at least one probe");
    let mut s = StageOutcome::from_martingale(name, expected, &worst.report);
    s.test_passed = reports.iter().all(|r| r.report.pass);
    s.pass = s.test_passed == (expected == Expectation::Pass);
    s
}

/// Builds `C_t` and the density `y_t = exp{−∫_0^t r dw − ½∫_0^t r² ds}`, checks
/// that `y` is a `P`-martingale, forms `Q° = ∫ y_T dP`, verifies the per-path
/// identity for `w̃_t = w_t + ∫_0^t r ds` and tests `C` under `Q°` (and
/// under `P` as a negative control).
pub fn change_drift(
    process: &DriftedProcess,
    ensemble: &PathEnsemble,
    config: &DriftChangeConfig,
) -> Result<DriftChangeReport> {
    let grid = ensemble.grid();
    let factorization_residual = process.factorization_residual(grid)?;
    if factorization_residual > FACTORIZATION_TOL {
        return Err(Error::Precondition(format!(
            "factorization residual {factorization_residual:e} exceeds {FACTORIZATION_TOL:e}"
        )));
    }
    let r = process
        .r
        .as_ref()
        .expect("checked by factorization_residual");
    let pts = grid.points();
    let width = grid.len();
    let last = grid.steps();
    let rv: Vec<f64> = pts.iter().map(|&t| r(t)).collect();
    if rv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("r is not finite on the grid".into()));
    }
    let space = process.phi.space().clone();
    let probes = match &config.probes {
        Some(p) => p.clone(),
        None => DualFunctional::norming_family(&space),
    };
    let sampled = process.phi.sample(grid)?;
    let paired = probes
        .iter()
        .map(|f| sampled.paired(f))
        .collect::<Result<Vec<_>>>()?;
    let psi: Vec<Vec<f64>> = pts.iter().map(|&t| (process.psi)(t)).collect();
    let drift_paired: Vec<Vec<f64>> = probes
        .iter()
        .map(|f| psi.iter().map(|v| f.pair_coords(v)).collect())
        .collect();

    // cumulative ∫ r ds and ∫ r² ds, trapezoidal
    let mut r_int = vec![0.0; width];
    let mut r2_int = vec![0.0; width];
    for k in 1..width {
        let h = 0.5 * (pts[k] - pts[k - 1]);
        r_int[k] = r_int[k - 1] + h * (rv[k - 1] + rv[k]);
        r2_int[k] = r2_int[k - 1] + h * (rv[k - 1] * rv[k - 1] + rv[k] * rv[k]);
    }

    // y_k with left-point sums for ∫ r dw
    let mut y = vec![0.0; ensemble.paths() * width];
    y.par_chunks_mut(width).enumerate().for_each(|(p, row)| {
        let w = ensemble.path(p);
        let mut ito = 0.0;
        row[0] = 1.0;
        for k in 1..width {
            ito += rv[k - 1] * (w[k] - w[k - 1]);
            row[k] = (-ito - 0.5 * r2_int[k]).exp();
        }
    });
    let p = VectorMeasure::scalar(ensemble.probability()?);
    let filtration = brownian_filtration(ensemble, config.observations, config.bins)?;
    let y_martingale =
        martingale_test(|k, a| y[a * width + k], &p, &filtration, config.confidence)?;
    let y_terminal: Vec<f64> = (0..ensemble.paths()).map(|a| y[a * width + last]).collect();
    let q = change_measure(&p, &y_terminal)?;

    // per-path identity ∫Φ dw̃ = ∫Φ dw + ∫ rΦ ds on [0, T]
    let drift_term = sampled.time_integral(0, last, &rv);
    let pettis_gap = (0..ensemble.paths())
        .into_par_iter()
        .map(|a| -> Result<f64> {
            let w = ensemble.path(a);
            let wt: Vec<f64> = w.iter().zip(&r_int).map(|(x, s)| x + s).collect();
            let lhs = sampled.by_parts(&wt, 0, last)?;
            let base = sampled.by_parts(w, 0, last)?;
            let rhs: Vec<f64> = base.iter().zip(&drift_term).map(|(x, d)| x + d).collect();
            Ok(space.distance_of(&lhs, &rhs))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    // C_t through each probe: ∫ pair(f,Ψ) ds + (Bi₁*)∫ pair(f,Φ) dw
    let c_table = |i: usize| -> Vec<f64> {
        let mut table = cumulative_table(&paired[i], ensemble);
        let drift = &drift_paired[i];
        let mut acc = vec![0.0; width];
        for k in 1..width {
            acc[k] = acc[k - 1] + 0.5 * (pts[k] - pts[k - 1]) * (drift[k - 1] + drift[k]);
        }
        table.par_chunks_mut(width).for_each(|row| {
            row.iter_mut().zip(&acc).for_each(|(x, a)| *x += a);
        });
        table
    };
    let c_under_q = probe_martingales(
        probes.len(),
        c_table,
        &q,
        ensemble,
        config.observations,
        config.bins,
        config.confidence,
    )?;
    let has_drift = rv.iter().any(|&x| x != 0.0);
    let c_under_p = if has_drift {
        Some(probe_martingales(
            probes.len(),
            c_table,
            &p,
            ensemble,
            config.observations,
            config.bins,
            config.confidence,
        )?)
    } else {
        None
    };

    let mut stages = vec![
        StageOutcome::from_gap("factorization", factorization_residual, FACTORIZATION_TOL),
        StageOutcome::from_martingale("y_martingale", Expectation::Pass, &y_martingale),
        StageOutcome::from_gap("pettis_identity", pettis_gap, PETTIS_TOL),
        worst_probe("c_under_q", Expectation::Pass, &c_under_q),
    ];
    if let Some(neg) = &c_under_p {
        stages.push(worst_probe("negative_control", Expectation::Fail, neg));
    }
    Ok(DriftChangeReport {
        stages,
        factorization_residual,
        pettis_gap,
        y_martingale,
        c_under_q,
        c_under_p,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub paths: usize,
    pub rms: f64,
    pub max_abs: f64,
}

/// RMS over paths of `(Bi₁*)∫_0^T r dw − Σ r(t_i)Δw_i` for the scalar
/// integrand `r`, on each grid of `fine` coarsened by the given step counts.
pub fn bi1star_convergence(
    fine: &PathEnsemble,
    steps: &[usize],
    r: impl Fn(f64) -> f64,
    dr: impl Fn(f64) -> f64,
) -> Result<Vec<ConvergenceRow>> {
    let kf = fine.grid().steps();
    let mut rows = Vec::with_capacity(steps.len());
    for &k in steps {
        if k == 0 || !kf.is_multiple_of(k) {
            return Err(Error::InvalidArgument(format!(
                "{k} steps do not divide the {kf} fine steps"
            )));
        }
        let stride = kf / k;
        let pts: Vec<f64> = (0..=k).map(|i| fine.grid().time(i * stride)).collect();
        let grid = TimeGrid::new(pts)?;
        let h: Vec<f64> = grid.points().iter().map(|&t| r(t)).collect();
        let dh: Vec<f64> = grid.points().iter().map(|&t| dr(t)).collect();
        let s = SampledIntegrand::scalar(&grid, h.clone(), dh)?;
        let gaps = (0..fine.paths())
            .into_par_iter()
            .map(|p| -> Result<f64> {
                let path: Vec<f64> = (0..=k).map(|i| fine.value(p, i * stride)).collect();
                let b = s.by_parts(&path, 0, k)?[0];
                Ok(b - ito_sum_oracle(&h, &path)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let rms = (gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt();
        let max_abs = gaps.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        rows.push(ConvergenceRow {
            steps: k,
            paths: fine.paths(),
            rms,
            max_abs,
        });
    }
    Ok(rows)
}
