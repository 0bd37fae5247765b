//! Change of measure with a vector-valued base measure: Brownian path
//! ensembles, `Q = ∫ y_T dN`, distribution preservation, density ratio
//! estimation and the martingale checks of the Girsanov statement, plus the
//! two worked examples (a conditional `L¹`-valued measure and the
//! `C([0,T])`-valued measure `N°`).

use std::borrow::Cow;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::banach::{BanachValue, DualFunctional, SpaceDescriptor, TimeGrid};
use crate::bins::BinEdges;
use crate::birkhoff::induced_measure;
use crate::conditioning::{
    bonferroni_z, martingale_test, BinnedStateFiltration, FiltrationSource, MartingaleReport,
    SnapshotFiltration,
};
use crate::error::{Error, Result};
use crate::measure::{DiscreteMeasureSpace, VectorMeasure};
use crate::report::{Expectation, StageOutcome};
use crate::rng::{derive_seed, path_rng, stream};

const CHUNK: usize = 8192;

/// Fold over `0..n` in fixed-size chunks and merge the chunk results in
/// order, so the floating point result does not depend on scheduling.
fn ordered_fold<T, I, F, M>(n: usize, init: I, fold: F, merge: M) -> T
where
    T: Send,
    I: Fn() -> T + Sync,
    F: Fn(&mut T, usize) + Sync,
    M: Fn(&mut T, T),
{
    let parts: Vec<T> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for a in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, a);
            }
            acc
        })
        .collect();
    let mut out = init();
    for p in parts {
        merge(&mut out, p);
    }
    out
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// Brownian paths sampled on a grid, row-major `paths × (K+1)`.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    grid: TimeGrid,
    paths: usize,
    values: Vec<f64>,
    seed: u64,
}

/// Simulates `paths` standard Brownian paths on `grid`. Path `i` draws from
/// its own stream of `seed`, so the result is independent of the thread
/// count.
pub fn simulate_bm(paths: usize, grid: &TimeGrid, seed: u64) -> Result<PathEnsemble> {
    if paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let width = grid.len();
    let sd: Vec<f64> = grid
        .points()
        .windows(2)
        .map(|w| (w[1] - w[0]).sqrt())
        .collect();
    let mut values = vec![0.0; paths * width];
    values
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(p, row)| {
            let mut rng = path_rng(seed, p as u64);
            for k in 0..width - 1 {
                let x: f64 = rng.sample(StandardNormal);
                row[k + 1] = row[k] + sd[k] * x;
            }
        });
    Ok(PathEnsemble {
        grid: grid.clone(),
        paths,
        values,
        seed,
    })
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let w = self.grid.len();
        &self.values[p * w..(p + 1) * w]
    }

    #[inline]
    pub fn value(&self, p: usize, k: usize) -> f64 {
        self.values[p * self.grid.len() + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.value(p, k)).collect()
    }

    /// Uniform probability over the paths.
    pub fn probability(&self) -> Result<Arc<DiscreteMeasureSpace>> {
        Ok(Arc::new(DiscreteMeasureSpace::uniform(self.paths)?))
    }
}

/// `count` roughly equally spaced grid indices from `0` to `K`, both included.
pub fn observation_times(steps: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, steps.max(1));
    let mut out: Vec<usize> = (0..=count).map(|i| i * steps / count).collect();
    out.dedup();
    out
}

/// `Q({ω}) = y_T(ω) N({ω})`. The storage layout of `N` is kept.
pub fn change_measure(n: &VectorMeasure, y_terminal: &[f64]) -> Result<VectorMeasure> {
    if y_terminal.len() != n.atom_count() {
        return Err(Error::SpaceMismatch(format!(
            "{} density values for {} atoms",
            y_terminal.len(),
            n.atom_count()
        )));
    }
    let mut factors = Vec::with_capacity(y_terminal.len());
    for (atom, &y) in y_terminal.iter().enumerate() {
        if n.is_null_atom(atom) {
            factors.push(if y.is_finite() { y } else { 0.0 });
        } else if !(y.is_finite() && y > 0.0) {
            return Err(Error::AssumptionViolated(format!(
                "density y_T = {y} at non-null atom {atom}"
            )));
        } else {
            factors.push(y);
        }
    }
    n.reweighted(&factors)
}

pub type AtomProcess<'a> = Box<dyn Fn(usize, usize) -> f64 + Sync + 'a>;
/// `g(k, atom, x)`: density ratio at grid index `k`. The atom argument lets
/// `g` depend on information fixed at time zero, such as a conditioning
/// variable.
pub type DensityRatioFn<'a> = Box<dyn Fn(usize, usize, f64) -> f64 + Sync + 'a>;

/// A scalar process `z` on the atoms of `N` with shift `θ`, density ratio
/// `g`, `y_t = g_t(z_t + θ(t))` and the changed measure `Q = ∫ y_T dN`.
pub struct GirsanovSetup<'a> {
    grid: TimeGrid,
    z: AtomProcess<'a>,
    theta: Vec<f64>,
    g: DensityRatioFn<'a>,
    n: VectorMeasure,
    q: VectorMeasure,
    y_terminal: Vec<f64>,
}

impl<'a> GirsanovSetup<'a> {
    pub fn new(
        grid: TimeGrid,
        z: AtomProcess<'a>,
        theta: impl Fn(f64) -> f64,
        g: DensityRatioFn<'a>,
        n: VectorMeasure,
    ) -> Result<Self> {
        let theta: Vec<f64> = grid.points().iter().map(|&t| theta(t)).collect();
        if let Some(x) = theta.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "shift value {x} is not finite"
            )));
        }
        let last = grid.steps();
        let y_terminal: Vec<f64> = (0..n.atom_count())
            .into_par_iter()
            .map(|a| g(last, a, z(last, a) + theta[last]))
            .collect();
        let q = change_measure(&n, &y_terminal)?;
        Ok(Self {
            grid,
            z,
            theta,
            g,
            n,
            q,
            y_terminal,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> &VectorMeasure {
        &self.n
    }

    pub fn q(&self) -> &VectorMeasure {
        &self.q
    }

    pub fn y_terminal(&self) -> &[f64] {
        &self.y_terminal
    }

    pub fn theta(&self, k: usize) -> f64 {
        self.theta[k]
    }

    #[inline]
    pub fn z(&self, k: usize, atom: usize) -> f64 {
        (self.z)(k, atom)
    }

    #[inline]
    pub fn z_tilde(&self, k: usize, atom: usize) -> f64 {
        (self.z)(k, atom) + self.theta[k]
    }

    #[inline]
    pub fn g(&self, k: usize, atom: usize, x: f64) -> f64 {
        (self.g)(k, atom, x)
    }

    #[inline]
    pub fn y(&self, k: usize, atom: usize) -> f64 {
        (self.g)(k, atom, self.z_tilde(k, atom))
    }

    pub fn z_column(&self, k: usize) -> Vec<f64> {
        (0..self.n.atom_count())
            .into_par_iter()
            .map(|a| self.z(k, a))
            .collect()
    }

    /// Natural filtration of `z`, approximated by `bins` quantile bins of
    /// `z_t` at each observation time.
    pub fn natural_filtration(
        &self,
        times: Vec<usize>,
        bins: usize,
    ) -> Result<BinnedStateFiltration<impl Fn(usize, usize) -> f64 + Sync + '_>> {
        BinnedStateFiltration::new(times, self.n.atom_count(), bins, move |k, a| self.z(k, a))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BinGap {
    pub left: f64,
    pub right: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PreservationReport {
    pub time_index: usize,
    /// `max_b ‖N_{z_t}(b) − Q_{z̃_t}(b)‖`
    pub distance: f64,
    pub z: f64,
    pub bins: Vec<BinGap>,
    pub pass: bool,
}

/// Compares the law of `z_t` under `N` with the law of `z̃_t` under `Q` on
/// quantile bins of `z_t`. The tolerance of bin `b` comes from the atom-wise
/// spread of `(1{z̃∈b} y_T − 1{z∈b}) N({ω})`.
pub fn check_distribution_preservation(
    setup: &GirsanovSetup<'_>,
    t: usize,
    bins: usize,
    confidence: f64,
) -> Result<PreservationReport> {
    if t >= setup.grid.len() {
        return Err(Error::InvalidArgument(format!(
            "time index {t} is off the grid"
        )));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    let z = setup.z_column(t);
    let zt: Vec<f64> = z.iter().map(|x| x + setup.theta[t]).collect();
    let edges = BinEdges::quantiles_open(&z, bins)?;
    let lhs = induced_measure(&setup.n, &z, &edges)?;
    let rhs = induced_measure(&setup.q, &zt, &edges)?;

    let nb = edges.len();
    let d = setup.n.dim();
    let n_atoms = setup.n.atom_count();
    let y = &setup.y_terminal;
    // per bin: coordinate sums then coordinate sums of squares
    let stats = ordered_fold(
        n_atoms,
        || vec![0.0; 2 * nb * d],
        |acc, a| {
            let kz = edges.locate(z[a]).expect("open bins cover every value");
            let kq = edges.locate(zt[a]).expect("open bins cover every value");
            let mut put = |k: usize, f: f64| {
                let (sum, sq) = acc.split_at_mut(nb * d);
                setup.n.accumulate(a, f, &mut sum[k * d..(k + 1) * d]);
                setup
                    .n
                    .accumulate_squares(a, f, &mut sq[k * d..(k + 1) * d]);
            };
            if kz == kq {
                put(kz, y[a] - 1.0);
            } else {
                put(kz, -1.0);
                put(kq, y[a]);
            }
        },
        |out, part| add_into(out, &part),
    );
    let zq = bonferroni_z(confidence, nb * d);
    let target = setup.n.target();
    let nf = n_atoms as f64;
    let mut per_bin = Vec::with_capacity(nb);
    let mut distance = 0.0_f64;
    for b in 0..nb {
        let gap = lhs.increment(b).distance(&rhs.increment(b))?;
        let sum = &stats[b * d..(b + 1) * d];
        let sq = &stats[nb * d + b * d..nb * d + (b + 1) * d];
        let sd: Vec<f64> = sum
            .iter()
            .zip(sq)
            .map(|(&m, &s)| {
                let var = if n_atoms > 1 {
                    ((s - m * m / nf) / (nf - 1.0)).max(0.0)
                } else {
                    s
                };
                (nf * var).sqrt()
            })
            .collect();
        let tolerance = (zq * target.norm_of(&sd)).max(crate::conditioning::EXACT_TOLERANCE_FLOOR);
        distance = distance.max(gap);
        let (left, right) = edges.bounds(b);
        per_bin.push(BinGap {
            left,
            right,
            gap,
            tolerance,
            pass: gap <= tolerance,
        });
    }
    let pass = per_bin.iter().all(|b| b.pass);
    Ok(PreservationReport {
        time_index: t,
        distance,
        z: zq,
        bins: per_bin,
        pass,
    })
}

/// Histogram density of the image of `N` under `samples`: bin value is
/// `N(samples ∈ bin) / width`. Samples outside the edges are ignored.
#[derive(Clone, Debug)]
pub struct VectorDensityEstimate {
    pub edges: BinEdges,
    pub values: Vec<BanachValue>,
    pub counts: Vec<usize>,
}

pub fn density_estimate(
    n: &VectorMeasure,
    samples: &[f64],
    edges: &BinEdges,
) -> Result<VectorDensityEstimate> {
    if samples.len() != n.atom_count() {
        return Err(Error::SpaceMismatch(format!(
            "{} samples for {} atoms",
            samples.len(),
            n.atom_count()
        )));
    }
    if !(edges.low().is_finite() && edges.high().is_finite()) {
        return Err(Error::InvalidArgument(
            "density bins need finite edges".into(),
        ));
    }
    let nb = edges.len();
    let d = n.dim();
    let mut flat = vec![0.0; nb * d];
    let mut counts = vec![0; nb];
    for (a, &x) in samples.iter().enumerate() {
        if let Some(k) = edges.locate(x) {
            n.accumulate(a, 1.0, &mut flat[k * d..(k + 1) * d]);
            counts[k] += 1;
        }
    }
    let values = flat
        .chunks_exact(d)
        .enumerate()
        .map(|(k, row)| {
            let w = edges.width(k);
            BanachValue::new(n.target().clone(), row.iter().map(|x| x / w).collect())
        })
        .collect::<Result<_>>()?;
    Ok(VectorDensityEstimate {
        edges: edges.clone(),
        values,
        counts,
    })
}

impl VectorDensityEstimate {
    /// `Σ_b value_b · width_b`, the mass of the covered range.
    pub fn integral(&self) -> BanachValue {
        let mut acc = self.values[0].space().zero();
        for (k, v) in self.values.iter().enumerate() {
            acc.add_scaled(self.edges.width(k), v).expect("same space");
        }
        acc
    }

    /// CSV with columns `bin_left,bin_right,component_0..component_{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.values[0].coords().len();
        let mut header = vec!["bin_left".to_string(), "bin_right".to_string()];
        header.extend((0..d).map(|c| format!("component_{c}")));
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let (l, r) = self.edges.bounds(k);
            let mut row = vec![format!("{l:e}"), format!("{r:e}")];
            row.extend(v.coords().iter().map(|x| format!("{x:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioBin {
    pub left: f64,
    pub right: f64,
    /// Atoms with `z_t` in the bin.
    pub count: usize,
    /// Atoms with `z_t + θ(t)` in the bin.
    pub shifted_count: usize,
    /// `None` when the bin is excluded.
    pub ratio: Option<f64>,
    /// Delta-method relative standard error of the ratio.
    pub rel_se: Option<f64>,
    /// Probe-weighted mean of `z_t + θ(t)` over the bin.
    pub centroid: Option<f64>,
}

/// `ĝ_t` on bins: `pair(f, F̂_t(b)) / pair(f, F̂_t(b − θ))`, where the shifted
/// density is estimated from the samples `z_t + θ(t)`.
#[derive(Clone, Debug)]
pub struct DensityRatio {
    pub theta: f64,
    pub min_count: usize,
    pub numerator: VectorDensityEstimate,
    pub denominator: VectorDensityEstimate,
    pub bins: Vec<RatioBin>,
}

pub fn density_ratio_estimate(
    n: &VectorMeasure,
    samples: &[f64],
    theta: f64,
    edges: &BinEdges,
    min_count: usize,
    probe: &DualFunctional,
) -> Result<DensityRatio> {
    probe.space().check_same(n.target())?;
    let shifted: Vec<f64> = samples.iter().map(|x| x + theta).collect();
    let numerator = density_estimate(n, samples, edges)?;
    let denominator = density_estimate(n, &shifted, edges)?;
    let d = n.dim();
    let pw: Vec<f64> = (0..n.atom_count())
        .into_par_iter()
        .map_init(
            || vec![0.0; d],
            |buf, a| {
                buf.iter_mut().for_each(|x| *x = 0.0);
                n.accumulate(a, 1.0, buf);
                probe.pair_coords(buf)
            },
        )
        .collect();
    let nb = edges.len();
    let mut num_sq = vec![0.0; nb];
    let mut den_sq = vec![0.0; nb];
    let mut moment = vec![0.0; nb];
    for (a, (&x, &xs)) in samples.iter().zip(&shifted).enumerate() {
        if let Some(k) = edges.locate(x) {
            num_sq[k] += pw[a] * pw[a];
        }
        if let Some(k) = edges.locate(xs) {
            den_sq[k] += pw[a] * pw[a];
            moment[k] += pw[a] * xs;
        }
    }
    let mut bins = Vec::with_capacity(nb);
    for k in 0..nb {
        let w = edges.width(k);
        let num = probe.pair_coords(numerator.values[k].coords()) * w;
        let den = probe.pair_coords(denominator.values[k].coords()) * w;
        let (left, right) = edges.bounds(k);
        let enough = numerator.counts[k] >= min_count && denominator.counts[k] >= min_count;
        let ratio = num / den;
        let valid = enough && den > 0.0 && ratio.is_finite() && ratio > 0.0;
        bins.push(RatioBin {
            left,
            right,
            count: numerator.counts[k],
            shifted_count: denominator.counts[k],
            ratio: valid.then_some(ratio),
            rel_se: valid.then(|| (num_sq[k] / (num * num) + den_sq[k] / (den * den)).sqrt()),
            centroid: valid.then(|| moment[k] / den),
        });
    }
    if bins.iter().all(|b| b.ratio.is_none()) {
        return Err(Error::Estimation(format!(
            "no bin reaches {min_count} samples on both sides of the ratio"
        )));
    }
    Ok(DensityRatio {
        theta,
        min_count,
        numerator,
        denominator,
        bins,
    })
}

impl DensityRatio {
    pub fn valid_bins(&self) -> impl Iterator<Item = &RatioBin> {
        self.bins.iter().filter(|b| b.ratio.is_some())
    }

    /// The valid bin containing `x`.
    pub fn bin_at(&self, x: f64) -> Option<&RatioBin> {
        self.valid_bins().find(|b| b.left <= x && x < b.right)
    }

    /// CSV with the numerator densities followed by the ratio columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.numerator.values[0].coords().len();
        let mut header = vec!["bin_left".to_string(), "bin_right".to_string()];
        header.extend((0..d).map(|c| format!("component_{c}")));
        header.extend(
            ["count", "shifted_count", "ratio", "rel_se", "centroid"]
                .iter()
                .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
        for (b, v) in self.bins.iter().zip(&self.numerator.values) {
            let mut row = vec![format!("{:e}", b.left), format!("{:e}", b.right)];
            row.extend(v.coords().iter().map(|x| format!("{x:e}")));
            row.push(b.count.to_string());
            row.push(b.shifted_count.to_string());
            row.push(opt(b.ratio));
            row.push(opt(b.rel_se));
            row.push(opt(b.centroid));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioComparisonRow {
    pub left: f64,
    pub right: f64,
    pub centroid: f64,
    pub estimate: f64,
    pub closed_form: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioComparison {
    pub rows: Vec<RatioComparisonRow>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `ĝ` with a closed form evaluated at the bin centroids, on the
/// valid bins lying inside `[low, high]`.
pub fn compare_density_ratio<G: Fn(f64) -> f64>(
    est: &DensityRatio,
    g: G,
    low: f64,
    high: f64,
    tolerance: f64,
) -> Result<RatioComparison> {
    let rows: Vec<RatioComparisonRow> = est
        .valid_bins()
        .filter(|b| b.left >= low && b.right <= high)
        .map(|b| {
            let centroid = b.centroid.expect("valid bins have a centroid");
            let estimate = b.ratio.expect("valid bins have a ratio");
            let closed_form = g(centroid);
            RatioComparisonRow {
                left: b.left,
                right: b.right,
                centroid,
                estimate,
                closed_form,
                rel_err: (estimate - closed_form).abs() / closed_form.abs(),
            }
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Estimation(format!(
            "no valid bin inside [{low}, {high}]"
        )));
    }
    let max_rel_err = rows.iter().fold(0.0_f64, |m, r| m.max(r.rel_err));
    Ok(RatioComparison {
        rows,
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GirsanovReport {
    /// `y` under `N`.
    pub y_martingale: MartingaleReport,
    /// `z̃ · y` under `N`.
    pub product_martingale: MartingaleReport,
    /// `∫_E z̃_s y_T dN = ∫_E z̃_s y_s dN` for each observation time `s`,
    /// each at a Bonferroni share of the confidence.
    pub tower: Vec<MartingaleReport>,
    /// `z̃` under `Q`.
    pub main: MartingaleReport,
    pub failed_assumptions: Vec<String>,
    pub pass: bool,
}

impl GirsanovReport {
    pub fn tower_pass(&self) -> bool {
        self.tower.iter().all(|r| r.pass)
    }

    /// The tower report with the largest residual-to-tolerance ratio.
    pub fn worst_tower(&self) -> Option<&MartingaleReport> {
        self.tower
            .iter()
            .max_by(|a, b| a.worst_ratio.total_cmp(&b.worst_ratio))
    }
}

/// Runs the two assumption checks, the tower identity and the main test of
/// `z̃` under `Q`, all against `filtration`.
pub fn girsanov_verify<F>(
    setup: &GirsanovSetup<'_>,
    filtration: &F,
    confidence: f64,
) -> Result<GirsanovReport>
where
    F: FiltrationSource + ?Sized,
{
    let y_martingale = martingale_test(|k, a| setup.y(k, a), &setup.n, filtration, confidence)?;
    let product_martingale = martingale_test(
        |k, a| setup.z_tilde(k, a) * setup.y(k, a),
        &setup.n,
        filtration,
        confidence,
    )?;
    let last = setup.grid.steps();
    let times = filtration.time_indices();
    let early: Vec<usize> = (0..times.len()).filter(|&p| times[p] < last).collect();
    let share = 1.0 - (1.0 - confidence) / early.len().max(1) as f64;
    let mut tower = Vec::with_capacity(early.len());
    for &pos in &early {
        let s = times[pos];
        let snap = SnapshotFiltration::new(s, last, filtration.partition_at(pos)?)?;
        tower.push(martingale_test(
            |k, a| setup.z_tilde(s, a) * setup.y(k, a),
            &setup.n,
            &snap,
            share,
        )?);
    }
    let main = martingale_test(|k, a| setup.z_tilde(k, a), &setup.q, filtration, confidence)?;

    let mut failed_assumptions = Vec::new();
    if !y_martingale.pass {
        failed_assumptions.push("y is not an N-martingale".to_string());
    }
    if !product_martingale.pass {
        failed_assumptions.push("z̃·y is not an N-martingale".to_string());
    }
    let pass = failed_assumptions.is_empty() && main.pass && tower.iter().all(|r| r.pass);
    Ok(GirsanovReport {
        y_martingale,
        product_martingale,
        tower,
        main,
        failed_assumptions,
        pass,
    })
}

/// The scalar case: `N = P`, `z = w`, `θ(t) = qt` and
/// `g_t(x) = exp(−qx + q²t/2)`, hence `y_t = exp(−q w_t − q²t/2)`.
pub fn scalar_example(ensemble: &PathEnsemble, q: f64) -> Result<GirsanovSetup<'_>> {
    let n = VectorMeasure::scalar(ensemble.probability()?);
    let times: Vec<f64> = ensemble.grid().points().to_vec();
    GirsanovSetup::new(
        ensemble.grid().clone(),
        Box::new(move |k, a| ensemble.value(a, k)),
        move |t| q * t,
        Box::new(move |k, _, x| (-q * x + 0.5 * q * q * times[k]).exp()),
        n,
    )
}

/// Product ensemble realizing `N(A) = P(A | w_T)` as an `L¹`-valued measure:
/// `slots` draws of `w_T` index the coordinates and `paths` independent
/// increment paths `b` continue each of them. Atom `i · slots + j` is path
/// `i` continuing draw `j`, so `z_t = w_T^j + b_t^i` stands for `w_{T+t}`.
pub struct ConditionalExample {
    pub increments: PathEnsemble,
    pub terminal: Vec<f64>,
    pub q: f64,
}

impl ConditionalExample {
    pub fn simulate(
        paths: usize,
        slots: usize,
        grid: &TimeGrid,
        q: f64,
        seed: u64,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::InvalidArgument("need at least one slot".into()));
        }
        let horizon = grid.horizon();
        let mut rng = stream(seed, "conditional/terminal");
        let terminal = (0..slots)
            .map(|_| horizon.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let increments = simulate_bm(paths, grid, derive_seed(seed, "conditional/paths"))?;
        Ok(Self {
            increments,
            terminal,
            q,
        })
    }

    pub fn slots(&self) -> usize {
        self.terminal.len()
    }

    pub fn atom_count(&self) -> usize {
        self.increments.paths() * self.slots()
    }

    #[inline]
    pub fn z(&self, k: usize, atom: usize) -> f64 {
        let m = self.slots();
        self.terminal[atom % m] + self.increments.value(atom / m, k)
    }

    /// Slot `j` of `N(A)` is the fraction of continuation paths of draw `j`
    /// that lie in `A`.
    pub fn measure(&self) -> Result<VectorMeasure> {
        let m = self.slots();
        let n = self.atom_count();
        let space = Arc::new(DiscreteMeasureSpace::uniform(n)?);
        let slot = (0..n).map(|a| (a % m) as u32).collect();
        let coef = vec![1.0 / self.increments.paths() as f64; n];
        VectorMeasure::slot_indicator(space, SpaceDescriptor::sample_function(m)?, slot, coef)
    }

    /// `θ(t) = qt` and `g_t(x) = exp(q²t/2 − q(x − w_T))`.
    pub fn setup(&self) -> Result<GirsanovSetup<'_>> {
        let q = self.q;
        let m = self.slots();
        let times: Vec<f64> = self.increments.grid().points().to_vec();
        GirsanovSetup::new(
            self.increments.grid().clone(),
            Box::new(move |k, a| self.z(k, a)),
            move |t| q * t,
            Box::new(move |k, a, x| {
                (0.5 * q * q * times[k] - q * (x - self.terminal[a % m])).exp()
            }),
            self.measure()?,
        )
    }
}

#[inline]
fn phi_at(tau: usize, t: usize, path: &[f64], grid: &TimeGrid) -> f64 {
    let m = tau.min(t);
    let (ts, tt, tm) = (grid.time(tau), grid.time(t), grid.time(m));
    (-path[tau] - path[t] + path[m] - 0.5 * (tt + ts - tm)).exp()
}

/// `Φ(ω, t)(τ) = exp{−w_τ − w_t + w_{t∧τ} − (t + τ − t∧τ)/2}` on one path.
pub fn phi_functional(tau: f64, t: f64, path: &[f64], grid: &TimeGrid) -> Result<f64> {
    if path.len() != grid.len() {
        return Err(Error::SpaceMismatch(format!(
            "path of length {} on a grid of {} points",
            path.len(),
            grid.len()
        )));
    }
    let find = |x: f64| {
        grid.index_of(x)
            .ok_or_else(|| Error::InvalidArgument(format!("time {x} is not a grid point")))
    };
    Ok(phi_at(find(tau)?, find(t)?, path, grid))
}

/// `N°(A) = ∫_A Φ(·, T) dP`, a `GridFunction`-valued measure whose
/// increment at path `ω` samples `τ ↦ Φ(ω, T)(τ)` over the grid, weighted
/// by `1/M`.
pub fn build_ncirc(ensemble: &PathEnsemble) -> Result<VectorMeasure> {
    let grid = ensemble.grid();
    let width = grid.len();
    let last = grid.steps();
    let inv = 1.0 / ensemble.paths() as f64;
    let mut flat = vec![0.0; ensemble.paths() * width];
    flat.par_chunks_mut(width).enumerate().for_each(|(p, row)| {
        let path = ensemble.path(p);
        for (j, x) in row.iter_mut().enumerate() {
            *x = phi_at(j, last, path, grid) * inv;
        }
    });
    VectorMeasure::tabulated_raw(
        ensemble.probability()?,
        SpaceDescriptor::GridFunction(grid.clone()),
        flat,
    )
}

/// Tests `E_P(Φ(·, t)(τ) | F_s) = exp{−w_s − s/2}` on the given partition
/// of the paths at time `s`.
pub fn check_conditional_phi(
    ensemble: &PathEnsemble,
    s: usize,
    t: usize,
    tau: usize,
    partition: Cow<'_, crate::measure::Partition>,
    confidence: f64,
) -> Result<MartingaleReport> {
    let grid = ensemble.grid();
    if t >= grid.len() || tau >= grid.len() {
        return Err(Error::InvalidArgument("time index is off the grid".into()));
    }
    let p = VectorMeasure::scalar(ensemble.probability()?);
    let snap = SnapshotFiltration::new(s, t, partition)?;
    let ts = grid.time(s);
    martingale_test(
        |k, a| {
            if k == s {
                (-ensemble.value(a, s) - 0.5 * ts).exp()
            } else {
                phi_at(tau, t, ensemble.path(a), grid)
            }
        },
        &p,
        &snap,
        confidence,
    )
}

#[derive(Clone, Debug)]
pub struct Prop41Config {
    pub confidence: f64,
    /// Quantile bins of `w_t` approximating the natural filtration.
    pub filtration_bins: usize,
    /// Number of observation intervals of the filtration.
    pub observations: usize,
    /// Quantile bins of the density ratio estimate.
    pub density_bins: usize,
    pub min_count: usize,
    pub compare_times: Vec<f64>,
    /// Relative tolerance of the `ĝ` comparison.
    pub g_tolerance: f64,
    pub min_paths: usize,
}

impl Default for Prop41Config {
    fn default() -> Self {
        Self {
            confidence: 0.99,
            filtration_bins: 32,
            observations: 8,
            density_bins: 16,
            min_count: 50,
            compare_times: vec![0.25, 0.5, 1.0],
            g_tolerance: 0.05,
            min_paths: 100_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prop41Report {
    pub stages: Vec<StageOutcome>,
    pub compare_indices: Vec<usize>,
    pub ratios: Vec<DensityRatio>,
    pub comparisons: Vec<RatioComparison>,
    pub girsanov: GirsanovReport,
    pub intermediate: Vec<MartingaleReport>,
    pub negative_control: MartingaleReport,
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        reason: e.to_string(),
    })
}

/// The pipeline for `N°`, `w̃_t = w_t + t`, `g_t(x) = exp{−t/2 − x}` and
/// `y_t = exp{−3t/2 − w_t}`: density ratio estimates and their comparison
/// with the closed form, the Girsanov checks under `N°` and `Q = ∫ y_T dN°`,
/// the conditional identity `E_P(Φ(·,T) | F_t) = exp{−w_t − t/2}` and the
/// negative control `w_t Φ(·,T)` under `P`.
pub fn prop41_verify(ensemble: &PathEnsemble, config: &Prop41Config) -> Result<Prop41Report> {
    if ensemble.paths() < config.min_paths {
        return Err(Error::Precondition(format!(
            "{} paths, at least {} required",
            ensemble.paths(),
            config.min_paths
        )));
    }
    let grid = ensemble.grid();
    let last = grid.steps();
    let ncirc = staged("density", build_ncirc(ensemble))?;
    let probe = DualFunctional::default_for(ncirc.target());

    let mut compare_indices = Vec::new();
    let mut ratios = Vec::new();
    let mut comparisons = Vec::new();
    for &t in &config.compare_times {
        let k = staged(
            "density",
            grid.index_of(t)
                .ok_or_else(|| Error::InvalidArgument(format!("time {t} is not a grid point"))),
        )?;
        let w = ensemble.column(k);
        let edges = staged("density", BinEdges::quantiles(&w, config.density_bins))?;
        let est = staged(
            "density",
            density_ratio_estimate(&ncirc, &w, t, &edges, config.min_count, &probe),
        )?;
        let half = 2.0 * t.sqrt();
        let cmp = staged(
            "g_comparison",
            compare_density_ratio(
                &est,
                |x| (-0.5 * t - x).exp(),
                -half,
                half,
                config.g_tolerance,
            ),
        )?;
        compare_indices.push(k);
        ratios.push(est);
        comparisons.push(cmp);
    }

    let times: Vec<f64> = grid.points().to_vec();
    let setup = GirsanovSetup::new(
        grid.clone(),
        Box::new(move |k, a| ensemble.value(a, k)),
        |t| t,
        Box::new(move |k, _, x| (-0.5 * times[k] - x).exp()),
        ncirc,
    )?;
    let obs = observation_times(last, config.observations);
    let filtration = setup.natural_filtration(obs.clone(), config.filtration_bins)?;
    let girsanov = staged(
        "girsanov",
        girsanov_verify(&setup, &filtration, config.confidence),
    )?;

    let early: Vec<usize> = (0..obs.len()).filter(|&p| obs[p] < last).collect();
    let share = 1.0 - (1.0 - config.confidence) / early.len().max(1) as f64;
    let tau = last / 2;
    let mut intermediate = Vec::new();
    for &pos in &early {
        intermediate.push(staged(
            "intermediate_identity",
            check_conditional_phi(
                ensemble,
                obs[pos],
                last,
                tau,
                filtration.partition_at(pos)?,
                share,
            ),
        )?);
    }

    let p = VectorMeasure::scalar(ensemble.probability()?);
    let phi_t: Vec<f64> = (0..ensemble.paths())
        .map(|a| phi_at(tau, last, ensemble.path(a), grid))
        .collect();
    let negative_control = staged(
        "negative_control",
        martingale_test(
            |k, a| ensemble.value(a, k) * phi_t[a],
            &p,
            &filtration,
            config.confidence,
        ),
    )?;

    let mut stages = Vec::new();
    let valid: usize = ratios.iter().map(|r| r.valid_bins().count()).sum();
    stages.push(StageOutcome::new(
        "density",
        Expectation::Pass,
        true,
        0.0,
        0.0,
        format!("{valid} valid bins over {} times", ratios.len()),
    ));
    let worst = comparisons
        .iter()
        .fold(0.0_f64, |m, c| m.max(c.max_rel_err));
    stages.push(StageOutcome::new(
        "g_comparison",
        Expectation::Pass,
        comparisons.iter().all(|c| c.pass),
        worst,
        config.g_tolerance,
        "max relative error of the density ratio on central bins".into(),
    ));
    stages.push(StageOutcome::from_martingale(
        "y_martingale",
        Expectation::Pass,
        &girsanov.y_martingale,
    ));
    stages.push(StageOutcome::from_martingale(
        "product_martingale",
        Expectation::Pass,
        &girsanov.product_martingale,
    ));
    stages.push(StageOutcome::from_martingale(
        "girsanov",
        Expectation::Pass,
        &girsanov.main,
    ));
    if let Some(t) = girsanov.worst_tower() {
        let mut s = StageOutcome::from_martingale("tower", Expectation::Pass, t);
        s.test_passed = girsanov.tower_pass();
        s.pass = s.test_passed;
        stages.push(s);
    }
    if let Some(worst) = intermediate
        .iter()
        .max_by(|a, b| a.worst_ratio.total_cmp(&b.worst_ratio))
    {
        let mut s =
            StageOutcome::from_martingale("intermediate_identity", Expectation::Pass, worst);
        s.test_passed = intermediate.iter().all(|r| r.pass);
        s.pass = s.test_passed;
        stages.push(s);
    }
    stages.push(StageOutcome::from_martingale(
        "negative_control",
        Expectation::Fail,
        &negative_control,
    ));
    Ok(Prop41Report {
        stages,
        compare_indices,
        ratios,
        comparisons,
        girsanov,
        intermediate,
        negative_control,
    })
}
