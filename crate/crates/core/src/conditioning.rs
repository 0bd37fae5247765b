//! Partition-generated σ-algebras, conditional expectation, filtrations and
//! the statistical martingale test.

use std::borrow::Cow;
use std::io::Write;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::banach::BanachValue;
use crate::bins::BinEdges;
use crate::birkhoff::bi1_sum_over;
use crate::error::{Error, Result};
use crate::measure::{DiscreteMeasureSpace, Partition, VectorMeasure};

/// Absolute tolerance floor for exact (noise-free) martingale checks.
pub const EXACT_TOLERANCE_FLOOR: f64 = 1e-10;

/// Partition generated by the preimages of the bins under `phi`.
pub fn sigma_of(phi: &[f64], bins: &BinEdges) -> Result<Partition> {
    let labels = phi
        .iter()
        .map(|&x| bins.locate_or_err(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition::from_labels(&labels))
}

/// `E(Φ | F)`: cellwise `ν`-average on non-null cells, zero on null cells.
pub fn conditional_expectation(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    partition: &Partition,
) -> Result<Vec<BanachValue>> {
    if phi.len() != space.atom_count() || partition.atom_count() != space.atom_count() {
        return Err(Error::SpaceMismatch(format!(
            "integrand of {} atoms, space of {}, partition of {}",
            phi.len(),
            space.atom_count(),
            partition.atom_count()
        )));
    }
    let zero = phi
        .first()
        .ok_or_else(|| Error::InvalidArgument("no atoms".into()))?
        .space()
        .zero();
    let mut out = vec![zero.clone(); phi.len()];
    for cell in partition.cells() {
        let mass = space.mass_of(cell);
        let avg = if mass > 0.0 {
            bi1_sum_over(phi, space, cell)?.scale(1.0 / mass)
        } else {
            zero.clone()
        };
        for &a in cell {
            out[a] = avg.clone();
        }
    }
    Ok(out)
}

/// Largest `‖∫_E E(Φ|F) dν − ∫_E Φ dν‖` over the cells `E` of `F`.
pub fn check_defining_identity(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    partition: &Partition,
) -> Result<f64> {
    let ce = conditional_expectation(phi, space, partition)?;
    let mut worst = 0.0_f64;
    for cell in partition.cells() {
        let lhs = bi1_sum_over(&ce, space, cell)?;
        let rhs = bi1_sum_over(phi, space, cell)?;
        worst = worst.max(lhs.distance(&rhs)?);
    }
    Ok(worst)
}

fn max_pointwise_gap(a: &[BanachValue], b: &[BanachValue]) -> Result<f64> {
    a.iter()
        .zip(b)
        .try_fold(0.0_f64, |m, (x, y)| Ok(m.max(x.distance(y)?)))
}

/// `max_ω ‖E(Φ|F) − E(E(Φ|G)|F)‖` for `G` finer than `F`.
pub fn check_tower(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    coarse: &Partition,
    fine: &Partition,
) -> Result<f64> {
    if !fine.is_finer(coarse)? {
        return Err(Error::Precondition(
            "tower check needs the inner partition to refine the outer one".into(),
        ));
    }
    let direct = conditional_expectation(phi, space, coarse)?;
    let inner = conditional_expectation(phi, space, fine)?;
    let nested = conditional_expectation(&inner, space, coarse)?;
    max_pointwise_gap(&direct, &nested)
}

/// `max_ω ‖E(φΦ|F) − φ E(Φ|F)‖` for `φ` constant on the cells of `F`.
pub fn check_pullout(
    phi: &[BanachValue],
    factor: &[f64],
    space: &DiscreteMeasureSpace,
    partition: &Partition,
) -> Result<f64> {
    if factor.len() != space.atom_count() {
        return Err(Error::SpaceMismatch(format!(
            "{} factor values for {} atoms",
            factor.len(),
            space.atom_count()
        )));
    }
    for cell in partition.cells() {
        let v = factor[cell[0]];
        if cell.iter().any(|&a| factor[a] != v) {
            return Err(Error::Precondition(format!(
                "factor is not constant on the cell containing atom {}",
                cell[0]
            )));
        }
    }
    let product: Vec<BanachValue> = phi.iter().zip(factor).map(|(v, &s)| v.scale(s)).collect();
    let lhs = conditional_expectation(&product, space, partition)?;
    let rhs: Vec<BanachValue> = conditional_expectation(phi, space, partition)?
        .iter()
        .zip(factor)
        .map(|(v, &s)| v.scale(s))
        .collect();
    max_pointwise_gap(&lhs, &rhs)
}

/// Anything that yields one partition per observation time.
pub trait FiltrationSource: Sync {
    fn atom_count(&self) -> usize;
    /// Increasing grid indices of the observation times.
    fn time_indices(&self) -> &[usize];
    /// Partition at position `pos` of [`FiltrationSource::time_indices`].
    fn partition_at(&self, pos: usize) -> Result<Cow<'_, Partition>>;
}

/// A monotone filtration: each partition refines the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct Filtration {
    time_indices: Vec<usize>,
    partitions: Vec<Partition>,
}

impl Filtration {
    pub fn new(time_indices: Vec<usize>, partitions: Vec<Partition>) -> Result<Self> {
        if time_indices.is_empty() {
            return Err(Error::InvalidArgument("empty filtration".into()));
        }
        if time_indices.len() != partitions.len() {
            return Err(Error::InvalidArgument(format!(
                "{} times but {} partitions",
                time_indices.len(),
                partitions.len()
            )));
        }
        if time_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("time indices must increase".into()));
        }
        for (k, w) in partitions.windows(2).enumerate() {
            if !w[1].is_finer(&w[0])? {
                return Err(Error::InvalidArgument(format!(
                    "partition at position {} does not refine its predecessor",
                    k + 1
                )));
            }
        }
        Ok(Self {
            time_indices,
            partitions,
        })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }
}

impl FiltrationSource for Filtration {
    fn atom_count(&self) -> usize {
        self.partitions[0].atom_count()
    }

    fn time_indices(&self) -> &[usize] {
        &self.time_indices
    }

    fn partition_at(&self, pos: usize) -> Result<Cow<'_, Partition>> {
        Ok(Cow::Borrowed(&self.partitions[pos]))
    }
}

/// Markov surrogate for a natural filtration: at each time the atoms are
/// grouped by quantile bins of a state variable. Partitions are built on
/// first use, cached, and are not nested across times.
pub struct BinnedStateFiltration<S> {
    time_indices: Vec<usize>,
    atom_count: usize,
    bins: usize,
    state: S,
    cache: Vec<OnceLock<Partition>>,
}

impl<S> BinnedStateFiltration<S>
where
    S: Fn(usize, usize) -> f64 + Sync,
{
    /// `state(time_index, atom)` is the conditioning variable.
    pub fn new(time_indices: Vec<usize>, atom_count: usize, bins: usize, state: S) -> Result<Self> {
        if time_indices.is_empty() {
            return Err(Error::InvalidArgument("empty filtration".into()));
        }
        if time_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("time indices must increase".into()));
        }
        if bins == 0 || atom_count == 0 {
            return Err(Error::InvalidArgument(
                "binned filtration needs atoms and at least one bin".into(),
            ));
        }
        let cache = time_indices.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            time_indices,
            atom_count,
            bins,
            state,
            cache,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }
}

impl<S> FiltrationSource for BinnedStateFiltration<S>
where
    S: Fn(usize, usize) -> f64 + Sync,
{
    fn atom_count(&self) -> usize {
        self.atom_count
    }

    fn time_indices(&self) -> &[usize] {
        &self.time_indices
    }

    fn partition_at(&self, pos: usize) -> Result<Cow<'_, Partition>> {
        if let Some(p) = self.cache[pos].get() {
            return Ok(Cow::Borrowed(p));
        }
        let k = self.time_indices[pos];
        let values: Vec<f64> = (0..self.atom_count).map(|a| (self.state)(k, a)).collect();
        let edges = BinEdges::quantiles(&values, self.bins)?;
        let partition = sigma_of(&values, &edges)?;
        let _ = self.cache[pos].set(partition);
        Ok(Cow::Borrowed(
            self.cache[pos].get().expect("cache was just filled"),
        ))
    }
}

/// One partition observed at two times `s < t`; tests the single identity
/// `E(x_t | P) = x_s` for a fixed partition `P`.
pub struct SnapshotFiltration<'p> {
    times: [usize; 2],
    partition: Cow<'p, Partition>,
}

impl<'p> SnapshotFiltration<'p> {
    pub fn new(s: usize, t: usize, partition: Cow<'p, Partition>) -> Result<Self> {
        if t <= s {
            return Err(Error::InvalidArgument(format!(
                "snapshot times must increase, got {s} and {t}"
            )));
        }
        Ok(Self {
            times: [s, t],
            partition,
        })
    }
}

impl FiltrationSource for SnapshotFiltration<'_> {
    fn atom_count(&self) -> usize {
        self.partition.atom_count()
    }

    fn time_indices(&self) -> &[usize] {
        &self.times
    }

    fn partition_at(&self, _pos: usize) -> Result<Cow<'_, Partition>> {
        Ok(Cow::Borrowed(self.partition.as_ref()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResidual {
    pub s: usize,
    pub t: usize,
    pub cell: usize,
    pub atoms: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MartingaleReport {
    pub pairs: Vec<(usize, usize)>,
    pub worst_residual: f64,
    /// Largest `residual / tolerance` over all cells.
    pub worst_ratio: f64,
    /// Bonferroni-corrected two-sided normal quantile used for every cell.
    pub z: f64,
    pub per_cell: Vec<CellResidual>,
    pub pass: bool,
}

impl MartingaleReport {
    /// Tolerance of the cell with the largest residual-to-tolerance ratio.
    /// The cell with the largest residual-to-tolerance ratio.
    pub fn binding_cell(&self) -> Option<&CellResidual> {
        self.per_cell
            .iter()
            .max_by(|a, b| (a.residual / a.tolerance).total_cmp(&(b.residual / b.tolerance)))
    }

    pub fn binding_tolerance(&self) -> f64 {
        self.binding_cell().map_or(0.0, |c| c.tolerance)
    }

    pub fn failing_cells(&self) -> usize {
        self.per_cell.iter().filter(|c| !c.pass).count()
    }

    /// CSV with columns `s,t,cell,residual,tolerance,pass`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "t", "cell", "residual", "tolerance", "pass"])?;
        for c in &self.per_cell {
            w.write_record([
                c.s.to_string(),
                c.t.to_string(),
                c.cell.to_string(),
                format!("{:e}", c.residual),
                format!("{:e}", c.tolerance),
                c.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct CellStat {
    s: usize,
    t: usize,
    cell: usize,
    atoms: usize,
    residual: f64,
    spread: f64,
}

/// Two-sided normal quantile with a Bonferroni split over `tests` tests.
pub fn bonferroni_z(confidence: f64, tests: usize) -> f64 {
    let alpha = (1.0 - confidence) / (2.0 * tests.max(1) as f64);
    Normal::standard().inverse_cdf(1.0 - alpha)
}

/// Tests `(Bi₂)∫_E x_t dN = (Bi₂)∫_E x_s dN` for every adjacent pair `s < t`
/// of the filtration and every cell `E` of `F_s` with `ν(E) > 0`.
///
/// With `d_ω = (x_t − x_s)(ω) N({ω})`, the residual of a cell is `‖Σ_E d_ω‖`.
/// Its tolerance is `z · ‖σ‖` where `σ_c = √(n_E · var_c)` is the standard
/// error of coordinate `c` of the sum and `z` is Bonferroni-corrected over
/// cells, pairs and coordinates; the tolerance never drops below
/// [`EXACT_TOLERANCE_FLOOR`].
pub fn martingale_test<X, F>(
    process: X,
    measure: &VectorMeasure,
    filtration: &F,
    confidence: f64,
) -> Result<MartingaleReport>
where
    X: Fn(usize, usize) -> f64 + Sync,
    F: FiltrationSource + ?Sized,
{
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    let times = filtration.time_indices();
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty filtration".into()));
    }
    if filtration.atom_count() != measure.atom_count() {
        return Err(Error::SpaceMismatch(format!(
            "filtration over {} atoms, measure over {}",
            filtration.atom_count(),
            measure.atom_count()
        )));
    }
    let dim = measure.dim();
    let target = measure.target();
    let weights = measure.space().weights();
    let pairs: Vec<(usize, usize)> = times.windows(2).map(|w| (w[0], w[1])).collect();

    let per_pair: Vec<Vec<CellStat>> = (0..pairs.len())
        .into_par_iter()
        .map(|pos| -> Result<Vec<CellStat>> {
            let (s, t) = pairs[pos];
            let partition = filtration.partition_at(pos)?;
            let mut stats = Vec::new();
            let mut sum = vec![0.0; dim];
            let mut sumsq = vec![0.0; dim];
            for (cell_id, cell) in partition.cells().iter().enumerate() {
                if cell.iter().map(|&a| weights[a]).sum::<f64>() <= 0.0 {
                    continue;
                }
                sum.iter_mut().for_each(|x| *x = 0.0);
                sumsq.iter_mut().for_each(|x| *x = 0.0);
                for &a in cell {
                    let dx = process(t, a) - process(s, a);
                    measure.accumulate(a, dx, &mut sum);
                    measure.accumulate_squares(a, dx, &mut sumsq);
                }
                let n = cell.len() as f64;
                let sd: Vec<f64> = sum
                    .iter()
                    .zip(&sumsq)
                    .map(|(&m, &q)| {
                        if cell.len() > 1 {
                            let var = ((q - m * m / n) / (n - 1.0)).max(0.0);
                            (n * var).sqrt()
                        } else {
                            q.sqrt()
                        }
                    })
                    .collect();
                stats.push(CellStat {
                    s,
                    t,
                    cell: cell_id,
                    atoms: cell.len(),
                    residual: target.norm_of(&sum),
                    spread: target.norm_of(&sd),
                });
            }
            Ok(stats)
        })
        .collect::<Result<_>>()?;

    let tests: usize = per_pair.iter().map(Vec::len).sum::<usize>() * dim;
    let z = bonferroni_z(confidence, tests);
    let mut per_cell = Vec::with_capacity(tests / dim.max(1));
    let mut worst_residual = 0.0_f64;
    let mut worst_ratio = 0.0_f64;
    for st in per_pair.into_iter().flatten() {
        let tolerance = (z * st.spread).max(EXACT_TOLERANCE_FLOOR);
        worst_residual = worst_residual.max(st.residual);
        worst_ratio = worst_ratio.max(st.residual / tolerance);
        per_cell.push(CellResidual {
            s: st.s,
            t: st.t,
            cell: st.cell,
            atoms: st.atoms,
            residual: st.residual,
            tolerance,
            pass: st.residual <= tolerance,
        });
    }
    let pass = per_cell.iter().all(|c| c.pass);
    Ok(MartingaleReport {
        pairs,
        worst_residual,
        worst_ratio,
        z,
        per_cell,
        pass,
    })
}
