//! First- and second-type Birkhoff integrals on finite atom spaces.
//!
//! On a finite space both integrals coincide with atom-wise sums, so the
//! reported `value` is always the exact sum. What the integrators add is the
//! certificate: a partition together with an oscillation bound `ε` such that
//! every tagged Riemann sum over that partition (and over any refinement of
//! it) lies within `ε` of the value.
//!
//! * first type: `Σ_E Φ(ω_E) ν(E)`, bound `Σ_E diam Φ(E) · ν(E)`
//! * second type: `Σ_E φ(ω_E) N(E)`, bound `Σ_E diam φ(E) · |N|(E)`
//!
//! where `|N|(E) = Σ_{ω∈E} ‖N({ω})‖` is the variation.

use std::sync::Arc;

use serde::Serialize;

use crate::banach::{BanachValue, SpaceDescriptor};
use crate::bins::BinEdges;
use crate::error::{Error, Result};
use crate::measure::{DiscreteMeasureSpace, Partition, TaggedPartition, VectorMeasure};

#[derive(Clone, Debug)]
pub struct BirkhoffResult {
    pub value: BanachValue,
    pub oscillation: f64,
    pub partition_used: Partition,
    /// Oscillation bound after each refinement step, starting from `{Ω}`.
    pub trace: Vec<f64>,
}

/// Row-major coordinates of a family of Banach values, all in one space.
struct Points {
    space: SpaceDescriptor,
    dim: usize,
    flat: Vec<f64>,
}

impl Points {
    fn new(values: &[BanachValue]) -> Result<Self> {
        let space = values
            .first()
            .ok_or_else(|| Error::InvalidArgument("integrand has no atoms".into()))?
            .space()
            .clone();
        let mut flat = Vec::with_capacity(values.len() * space.dim());
        for v in values {
            space.check_same(v.space())?;
            flat.extend_from_slice(v.coords());
        }
        Ok(Self {
            dim: space.dim(),
            space,
            flat,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.flat[i * self.dim..(i + 1) * self.dim]
    }

    fn dist(&self, a: usize, b: usize) -> f64 {
        self.space.distance_of(self.row(a), self.row(b))
    }

    /// Largest pairwise distance in `cell` and a pair attaining it.
    fn diameter(&self, cell: &[usize]) -> (f64, usize) {
        let mut best = (0.0, cell[0]);
        for (i, &a) in cell.iter().enumerate() {
            for &b in &cell[i + 1..] {
                let d = self.dist(a, b);
                if d > best.0 {
                    best = (d, a);
                }
            }
        }
        best
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::SpaceMismatch(format!(
            "{what} has {got} entries, expected {want}"
        )));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    Ok(())
}

/// `Σ_E diam Φ(E) · ν(E)` over the cells of `partition`.
pub fn oscillation_bound(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    partition: &Partition,
) -> Result<f64> {
    check_len("integrand", phi.len(), space.atom_count())?;
    check_len("partition", partition.atom_count(), space.atom_count())?;
    let pts = Points::new(phi)?;
    Ok(partition
        .cells()
        .iter()
        .map(|c| pts.diameter(c).0 * space.mass_of(c))
        .sum())
}

/// Second-type counterpart: `Σ_E diam φ(E) · |N|(E)`.
pub fn oscillation_bound_bi2(phi: &[f64], n: &VectorMeasure, partition: &Partition) -> Result<f64> {
    check_len("integrand", phi.len(), n.atom_count())?;
    check_len("partition", partition.atom_count(), n.atom_count())?;
    Ok(partition
        .cells()
        .iter()
        .map(|c| scalar_spread(phi, c) * n.variation_of(c))
        .sum())
}

fn scalar_spread(phi: &[f64], cell: &[usize]) -> f64 {
    let (lo, hi) = cell
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(phi[a]), hi.max(phi[a]))
        });
    hi - lo
}

/// Greedy refinement: repeatedly split the cell with the largest
/// contribution until the bound drops to `tol` or every cell is a singleton.
fn refine_until<C, S>(
    atom_count: usize,
    tol: f64,
    contribution: C,
    split: S,
) -> (Partition, f64, Vec<f64>)
where
    C: Fn(&[usize]) -> f64,
    S: Fn(&[usize]) -> (Vec<usize>, Vec<usize>),
{
    let mut cells: Vec<(Vec<usize>, f64)> = vec![{
        let c: Vec<usize> = (0..atom_count).collect();
        let k = contribution(&c);
        (c, k)
    }];
    let mut trace = Vec::new();
    loop {
        // a split never raises the exact bound; re-summing in a new order
        // can, by a few ulps
        let sum: f64 = cells.iter().map(|(_, k)| k).sum();
        let osc = trace.last().map_or(sum, |&prev: &f64| sum.min(prev));
        trace.push(osc);
        if osc <= tol {
            break;
        }
        let (idx, _) = cells
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| c.len() > 1)
            .fold(
                (usize::MAX, 0.0),
                |best, (i, (_, k))| {
                    if *k > best.1 {
                        (i, *k)
                    } else {
                        best
                    }
                },
            );
        if idx == usize::MAX {
            break;
        }
        let (cell, _) = cells.swap_remove(idx);
        let (a, b) = split(&cell);
        let ka = contribution(&a);
        let kb = contribution(&b);
        cells.push((a, ka));
        cells.push((b, kb));
    }
    let osc = *trace.last().expect("trace is nonempty");
    let partition = Partition::new(atom_count, cells.into_iter().map(|(c, _)| c).collect())
        .expect("refinement keeps a valid partition");
    (partition, osc, trace)
}

fn split_by_key(cell: &[usize], key: impl Fn(usize) -> f64) -> (Vec<usize>, Vec<usize>) {
    let mut sorted = cell.to_vec();
    sorted.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let b = sorted.split_off(sorted.len() / 2);
    (sorted, b)
}

/// Exact `Σ_{ω∈A} Φ(ω) ν({ω})`.
pub fn bi1_sum_over(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    atoms: &[usize],
) -> Result<BanachValue> {
    let target = phi
        .first()
        .ok_or_else(|| Error::InvalidArgument("integrand has no atoms".into()))?
        .space();
    let mut acc = target.zero();
    for &a in atoms {
        acc.add_scaled(space.weight(a), &phi[a])?;
    }
    Ok(acc)
}

/// Exact `Σ_{ω∈A} φ(ω) N({ω})`.
pub fn bi2_sum_over(phi: &[f64], n: &VectorMeasure, atoms: &[usize]) -> BanachValue {
    let mut acc = vec![0.0; n.dim()];
    for &a in atoms {
        n.accumulate(a, phi[a], &mut acc);
    }
    BanachValue::new(n.target().clone(), acc).expect("dimension matches target")
}

/// First-type Birkhoff integral `(Bi₁)∫ Φ dν` with its certificate.
pub fn bi1_integrate(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    tol: f64,
) -> Result<BirkhoffResult> {
    check_tol(tol)?;
    check_len("integrand", phi.len(), space.atom_count())?;
    let pts = Points::new(phi)?;
    let (partition, oscillation, trace) = refine_until(
        space.atom_count(),
        tol,
        |c| pts.diameter(c).0 * space.mass_of(c),
        |c| {
            // split along the diameter: order by distance to one endpoint
            let (_, anchor) = pts.diameter(c);
            split_by_key(c, |a| pts.dist(a, anchor))
        },
    );
    let mut value = pts.space.zero();
    for cell in partition.cells() {
        value = value.add(&bi1_sum_over(phi, space, cell)?)?;
    }
    Ok(BirkhoffResult {
        value,
        oscillation,
        partition_used: partition,
        trace,
    })
}

/// Second-type Birkhoff integral `(Bi₂)∫ φ dN` with its certificate.
pub fn bi2_integrate(phi: &[f64], n: &VectorMeasure, tol: f64) -> Result<BirkhoffResult> {
    check_tol(tol)?;
    check_len("integrand", phi.len(), n.atom_count())?;
    if let Some(x) = phi.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "integrand value {x} is not finite"
        )));
    }
    let (partition, oscillation, trace) = refine_until(
        n.atom_count(),
        tol,
        |c| scalar_spread(phi, c) * n.variation_of(c),
        |c| split_by_key(c, |a| phi[a]),
    );
    let mut value = n.target().zero();
    for cell in partition.cells() {
        value = value.add(&bi2_sum_over(phi, n, cell))?;
    }
    Ok(BirkhoffResult {
        value,
        oscillation,
        partition_used: partition,
        trace,
    })
}

/// `Σ_E Φ(tag_E) ν(E)`
pub fn tagged_sum_bi1(
    phi: &[BanachValue],
    space: &DiscreteMeasureSpace,
    tagged: &TaggedPartition,
) -> Result<BanachValue> {
    let mut acc = phi[0].space().zero();
    for (cell, &tag) in tagged.partition().cells().iter().zip(tagged.tags()) {
        acc.add_scaled(space.mass_of(cell), &phi[tag])?;
    }
    Ok(acc)
}

/// `Σ_E φ(tag_E) N(E)`
pub fn tagged_sum_bi2(
    phi: &[f64],
    n: &VectorMeasure,
    tagged: &TaggedPartition,
) -> Result<BanachValue> {
    let mut acc = n.target().zero();
    for (cell, &tag) in tagged.partition().cells().iter().zip(tagged.tags()) {
        acc.add_scaled(phi[tag], &n.measure_of(cell))?;
    }
    Ok(acc)
}

/// Image measure `N_φ(B) = N(φ⁻¹(B))` over the bins as atoms. The bin atoms
/// carry the pushed-forward base weights `ν(φ⁻¹(B))`.
pub fn induced_measure(n: &VectorMeasure, phi: &[f64], bins: &BinEdges) -> Result<VectorMeasure> {
    check_len("integrand", phi.len(), n.atom_count())?;
    let b = bins.len();
    let mut flat = vec![0.0; b * n.dim()];
    let mut weights = vec![0.0; b];
    let d = n.dim();
    for (atom, &x) in phi.iter().enumerate() {
        let k = bins.locate_or_err(x)?;
        n.accumulate(atom, 1.0, &mut flat[k * d..(k + 1) * d]);
        weights[k] += n.space().weight(atom);
    }
    let space = Arc::new(DiscreteMeasureSpace::new(weights)?);
    VectorMeasure::tabulated_raw(space, n.target().clone(), flat)
}

#[derive(Clone, Debug)]
pub struct IntegralComparison {
    pub lhs: BirkhoffResult,
    pub rhs: BirkhoffResult,
    pub gap: f64,
}

/// JSON form of an [`IntegralComparison`].
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRecord {
    pub lhs_coords: Vec<f64>,
    pub rhs_coords: Vec<f64>,
    pub gap: f64,
    pub oscillation: f64,
    pub cells: usize,
}

impl IntegralComparison {
    fn new(lhs: BirkhoffResult, rhs: BirkhoffResult) -> Result<Self> {
        let gap = lhs.value.distance(&rhs.value)?;
        Ok(Self { lhs, rhs, gap })
    }

    /// `gap / (1 + ‖lhs‖)`
    pub fn relative_gap(&self) -> f64 {
        self.gap / (1.0 + self.lhs.value.norm())
    }

    pub fn record(&self) -> ComparisonRecord {
        ComparisonRecord {
            lhs_coords: self.lhs.value.coords().to_vec(),
            rhs_coords: self.rhs.value.coords().to_vec(),
            gap: self.gap,
            oscillation: self.lhs.oscillation.max(self.rhs.oscillation),
            cells: self
                .lhs
                .partition_used
                .len()
                .max(self.rhs.partition_used.len()),
        }
    }
}

/// `(Bi₁)∫ φΦ dν` against `(Bi₂)∫ φ dN` with `N = Φ dν`.
pub fn check_duality(
    phi: &[f64],
    big_phi: &[BanachValue],
    space: &Arc<DiscreteMeasureSpace>,
    tol: f64,
) -> Result<IntegralComparison> {
    check_len("scalar integrand", phi.len(), space.atom_count())?;
    let target = big_phi
        .first()
        .ok_or_else(|| Error::InvalidArgument("integrand has no atoms".into()))?
        .space()
        .clone();
    let product: Vec<BanachValue> = big_phi.iter().zip(phi).map(|(v, &s)| v.scale(s)).collect();
    let lhs = bi1_integrate(&product, space, tol)?;
    let n = VectorMeasure::density(space.clone(), target, big_phi)?;
    let rhs = bi2_integrate(phi, &n, tol)?;
    IntegralComparison::new(lhs, rhs)
}

#[derive(Clone, Debug)]
pub struct SubstitutionReport {
    pub comparison: IntegralComparison,
    /// Every bin holds at most one distinct value of `φ`.
    pub exact_binning: bool,
    /// `Σ_B max_{ω∈φ⁻¹B} |ψ(φ(ω)) − ψ(r_B)| · |N|(φ⁻¹B)`; zero for exact binning.
    pub binning_bound: f64,
}

/// `(Bi₂)∫ ψ∘φ dN` against `(Bi₂)∫ ψ dN_φ`, with bin representatives `r_B`
/// equal to the value of `φ` found in the bin (its midpoint otherwise).
pub fn check_substitution<F>(
    psi: F,
    phi: &[f64],
    n: &VectorMeasure,
    bins: &BinEdges,
    tol: f64,
) -> Result<SubstitutionReport>
where
    F: Fn(f64) -> f64,
{
    check_len("integrand", phi.len(), n.atom_count())?;
    let induced = induced_measure(n, phi, bins)?;
    let mut preimages: Vec<Vec<usize>> = vec![Vec::new(); bins.len()];
    for (atom, &x) in phi.iter().enumerate() {
        preimages[bins.locate_or_err(x)?].push(atom);
    }
    let mut exact = true;
    let reps: Vec<f64> = preimages
        .iter()
        .enumerate()
        .map(|(b, pre)| match pre.first() {
            Some(&first) if pre.iter().all(|&a| phi[a] == phi[first]) => phi[first],
            Some(&first) => {
                exact = false;
                let (lo, hi) = bins.bounds(b);
                if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else {
                    phi[first]
                }
            }
            None => {
                let (lo, hi) = bins.bounds(b);
                if lo.is_finite() {
                    lo
                } else {
                    hi
                }
            }
        })
        .collect();
    let binning_bound = preimages
        .iter()
        .zip(&reps)
        .map(|(pre, &r)| {
            let spread = pre
                .iter()
                .map(|&a| (psi(phi[a]) - psi(r)).abs())
                .fold(0.0, f64::max);
            spread * n.variation_of(pre)
        })
        .sum();
    let composed: Vec<f64> = phi.iter().map(|&x| psi(x)).collect();
    let lhs = bi2_integrate(&composed, n, tol)?;
    let on_bins: Vec<f64> = reps.iter().map(|&r| psi(r)).collect();
    let rhs = bi2_integrate(&on_bins, &induced, tol)?;
    Ok(SubstitutionReport {
        comparison: IntegralComparison::new(lhs, rhs)?,
        exact_binning: exact,
        binning_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(n: usize) -> Vec<BanachValue> {
        (0..n)
            .map(|i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                BanachValue::vector(e).unwrap()
            })
            .collect()
    }

    #[test]
    fn oscillation_examples() {
        let space = DiscreteMeasureSpace::new(vec![0.5, 0.5]).unwrap();
        let f = vec![BanachValue::real(0.0), BanachValue::real(1.0)];
        assert_eq!(
            oscillation_bound(&f, &space, &Partition::trivial(2)).unwrap(),
            1.0
        );
        assert_eq!(
            oscillation_bound(&f, &space, &Partition::atoms(2)).unwrap(),
            0.0
        );
        let c = vec![BanachValue::real(4.0); 2];
        assert_eq!(
            oscillation_bound(&c, &space, &Partition::trivial(2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn bi1_examples() {
        let space = DiscreteMeasureSpace::uniform(5).unwrap();
        let x0 = BanachValue::vector(vec![1.5, -2.0]).unwrap();
        let r = bi1_integrate(&vec![x0.clone(); 5], &space, 1e-9).unwrap();
        assert!(r.value.distance(&x0).unwrap() < 1e-15);
        assert_eq!(r.oscillation, 0.0);

        let zero = vec![SpaceDescriptor::FiniteDim(3).zero(); 5];
        assert!(bi1_integrate(&zero, &space, 1e-9).unwrap().value.is_zero());

        let w = DiscreteMeasureSpace::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = bi1_integrate(&basis(4), &w, 1e-9).unwrap();
        assert_eq!(r.value.coords(), &[0.1, 0.2, 0.3, 0.4]);
        assert!(bi1_integrate(&basis(4), &w, 0.0).is_err());
    }

    #[test]
    fn bi2_examples() {
        let space = Arc::new(DiscreteMeasureSpace::new(vec![1.0 / 3.0; 3]).unwrap());
        let n = VectorMeasure::density(space, SpaceDescriptor::FiniteDim(3), &basis(3)).unwrap();
        let r = bi2_integrate(&[1.0, 2.0, 3.0], &n, 1e-9).unwrap();
        let want = [1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in r.value.coords().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let ones = bi2_integrate(&[1.0; 3], &n, 1e-9).unwrap();
        assert!(ones.value.distance(&n.total()).unwrap() < 1e-15);
        let ind = bi2_integrate(&[0.0, 1.0, 1.0], &n, 1e-9).unwrap();
        assert!(ind.value.distance(&n.measure_of(&[1, 2])).unwrap() < 1e-15);
    }

    #[test]
    fn induced_measure_examples() {
        let space = Arc::new(DiscreteMeasureSpace::uniform(4).unwrap());
        let n = VectorMeasure::density(space.clone(), SpaceDescriptor::FiniteDim(4), &basis(4))
            .unwrap();
        let bins = BinEdges::new(vec![0.0, 2.0, 4.0]).unwrap();
        let m = induced_measure(&n, &[0.0, 1.0, 2.0, 3.0], &bins).unwrap();
        assert_eq!(m.measure_of(&[0]), n.measure_of(&[0, 1]));
        assert_eq!(m.measure_of(&[1]), n.measure_of(&[2, 3]));

        let c = induced_measure(&n, &[1.0; 4], &bins).unwrap();
        assert!(c.measure_of(&[0]).distance(&n.total()).unwrap() < 1e-15);
        assert!(c.measure_of(&[1]).is_zero());

        let signed = VectorMeasure::tabulated(
            space,
            SpaceDescriptor::Real,
            &[1.0, -1.0, 2.0, -2.0].map(BanachValue::real),
        )
        .unwrap();
        let s = induced_measure(&signed, &[0.5, 3.0, 1.0, 2.5], &bins).unwrap();
        assert!(s.total().is_zero());

        assert!(matches!(
            induced_measure(&n, &[0.0, 1.0, 2.0, 9.0], &bins),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn duality_and_substitution_trivial_cases() {
        let space = Arc::new(DiscreteMeasureSpace::new(vec![0.1, 0.4, 0.2, 0.3]).unwrap());
        let big: Vec<BanachValue> = (0..4)
            .map(|i| BanachValue::vector(vec![i as f64, 1.0 - i as f64]).unwrap())
            .collect();
        let d = check_duality(&[1.0; 4], &big, &space, 1e-9).unwrap();
        assert!(d.gap <= 1e-12);
        let n = VectorMeasure::density(space.clone(), SpaceDescriptor::FiniteDim(2), &big).unwrap();
        assert!(d.lhs.value.distance(&n.total()).unwrap() <= 1e-12);
        let ind = check_duality(&[0.0, 1.0, 0.0, 1.0], &big, &space, 1e-9).unwrap();
        assert!(ind.rhs.value.distance(&n.measure_of(&[1, 3])).unwrap() <= 1e-12);

        let phi = [0.0, 1.0, 1.0, 2.0];
        let bins = BinEdges::new(vec![-0.5, 0.5, 1.5, 2.5]).unwrap();
        let id = check_substitution(|x| x, &phi, &n, &bins, 1e-9).unwrap();
        assert!(id.exact_binning);
        assert!(id.comparison.gap <= 1e-12);
        let one = check_substitution(|_| 1.0, &phi, &n, &bins, 1e-9).unwrap();
        assert!(one.comparison.lhs.value.distance(&n.total()).unwrap() <= 1e-12);
        assert!(one.comparison.rhs.value.distance(&n.total()).unwrap() <= 1e-12);

        let coarse = BinEdges::new(vec![-0.5, 2.5]).unwrap();
        let approx = check_substitution(|x| x * x, &phi, &n, &coarse, 1e-9).unwrap();
        assert!(!approx.exact_binning);
        assert!(approx.comparison.gap <= approx.binning_bound + 1e-12);
    }

    #[test]
    fn certificate_survives_random_tags() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let space = Arc::new(
            DiscreteMeasureSpace::new((0..n).map(|_| rng.random::<f64>()).collect()).unwrap(),
        );
        let phi: Vec<BanachValue> = (0..n)
            .map(|_| BanachValue::vector(vec![rng.random(), rng.random()]).unwrap())
            .collect();
        let r = bi1_integrate(&phi, &space, 0.05).unwrap();
        assert!(r.oscillation <= 0.05);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for _ in 0..100 {
            let t = TaggedPartition::random(r.partition_used.clone(), &mut rng);
            let s = tagged_sum_bi1(&phi, &space, &t).unwrap();
            assert!(s.distance(&r.value).unwrap() <= r.oscillation + 1e-12);
        }
    }

    #[test]
    fn refinement_never_increases_oscillation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let space = DiscreteMeasureSpace::uniform(30).unwrap();
        let phi: Vec<BanachValue> = (0..30).map(|_| BanachValue::real(rng.random())).collect();
        for _ in 0..20 {
            let la: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
            let lb: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
            let p = Partition::from_labels(&la);
            let q = Partition::from_labels(&lb);
            let fine = oscillation_bound(&phi, &space, &p.refine(&q).unwrap()).unwrap();
            assert!(fine <= oscillation_bound(&phi, &space, &p).unwrap() + 1e-12);
        }
    }
}
