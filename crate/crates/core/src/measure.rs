//! Finite atom spaces, partitions and vector measures.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::banach::{BanachValue, SpaceDescriptor};
use crate::error::{Error, Result};

/// A finite measure space: atoms `0..n` with nonnegative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasureSpace {
    weights: Vec<f64>,
    total: f64,
    probability: bool,
}

impl DiscreteMeasureSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument(
                "measure space needs at least one atom".into(),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "atom weights must be finite and nonnegative, got {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            probability: (total - 1.0).abs() <= 1e-12,
            weights,
            total,
        })
    }

    /// `n` atoms of mass `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "measure space needs at least one atom".into(),
            ));
        }
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn atom_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, atom: usize) -> f64 {
        self.weights[atom]
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn is_probability(&self) -> bool {
        self.probability
    }

    pub fn mass_of(&self, atoms: &[usize]) -> f64 {
        atoms.iter().map(|&a| self.weights[a]).sum()
    }
}

/// Disjoint nonempty cells covering `0..atom_count`. Cells are kept sorted
/// internally and ordered by their smallest atom.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    atom_count: usize,
    cells: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(atom_count: usize, cells: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; atom_count];
        for cell in &cells {
            if cell.is_empty() {
                return Err(Error::InvalidArgument("partition has an empty cell".into()));
            }
            for &a in cell {
                if a >= atom_count {
                    return Err(Error::InvalidArgument(format!(
                        "atom {a} out of range for {atom_count} atoms"
                    )));
                }
                if std::mem::replace(&mut seen[a], true) {
                    return Err(Error::InvalidArgument(format!(
                        "atom {a} appears in more than one cell"
                    )));
                }
            }
        }
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("atom {a} is not covered")));
        }
        Ok(Self::canonical(atom_count, cells))
    }

    fn canonical(atom_count: usize, mut cells: Vec<Vec<usize>>) -> Self {
        for c in &mut cells {
            c.sort_unstable();
        }
        cells.sort_unstable_by_key(|c| c[0]);
        Self { atom_count, cells }
    }

    /// The single-cell partition `{Ω}`.
    pub fn trivial(atom_count: usize) -> Self {
        Self {
            atom_count,
            cells: vec![(0..atom_count).collect()],
        }
    }

    /// The finest partition, one atom per cell.
    pub fn atoms(atom_count: usize) -> Self {
        Self {
            atom_count,
            cells: (0..atom_count).map(|a| vec![a]).collect(),
        }
    }

    /// Groups atoms by label value. Labels need not be contiguous.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut cells: Vec<Vec<usize>> = Vec::new();
        for (atom, &l) in labels.iter().enumerate() {
            let id = *remap.entry(l).or_insert_with(|| {
                cells.push(Vec::new());
                cells.len() - 1
            });
            cells[id].push(atom);
        }
        // first-seen order is already ordered by smallest atom
        Self {
            atom_count: labels.len(),
            cells,
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell index of each atom.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.atom_count];
        for (i, c) in self.cells.iter().enumerate() {
            for &a in c {
                labels[a] = i;
            }
        }
        labels
    }

    fn check_same_space(&self, other: &Partition) -> Result<()> {
        if self.atom_count != other.atom_count {
            return Err(Error::SpaceMismatch(format!(
                "partitions over {} and {} atoms",
                self.atom_count, other.atom_count
            )));
        }
        Ok(())
    }

    /// Common refinement: nonempty intersections of a cell of `self` with a
    /// cell of `other`.
    pub fn refine(&self, other: &Partition) -> Result<Partition> {
        self.check_same_space(other)?;
        let lp = self.labels();
        let lq = other.labels();
        let joint: Vec<usize> = lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| a * other.cells.len() + b)
            .collect();
        Ok(Self::from_labels(&joint))
    }

    /// True iff every cell of `self` lies inside a single cell of `other`.
    pub fn is_finer(&self, other: &Partition) -> Result<bool> {
        self.check_same_space(other)?;
        let lq = other.labels();
        Ok(self
            .cells
            .iter()
            .all(|c| c.iter().all(|&a| lq[a] == lq[c[0]])))
    }
}

/// A partition with one tag atom chosen inside every cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedPartition {
    partition: Partition,
    tags: Vec<usize>,
}

impl TaggedPartition {
    pub fn new(partition: Partition, tags: Vec<usize>) -> Result<Self> {
        if tags.len() != partition.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tags for {} cells",
                tags.len(),
                partition.len()
            )));
        }
        for (cell, tag) in partition.cells().iter().zip(&tags) {
            if cell.binary_search(tag).is_err() {
                return Err(Error::InvalidArgument(format!(
                    "tag {tag} is not in its cell"
                )));
            }
        }
        Ok(Self { partition, tags })
    }

    /// Uniformly random tag in every cell.
    pub fn random<R: Rng + ?Sized>(partition: Partition, rng: &mut R) -> Self {
        let tags = partition
            .cells()
            .iter()
            .map(|c| c[rng.random_range(0..c.len())])
            .collect();
        Self { partition, tags }
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn tags(&self) -> &[usize] {
        &self.tags
    }
}

/// How the per-atom increments `N({ω})` of a vector measure are stored.
#[derive(Clone, Debug, PartialEq)]
pub enum Realization {
    /// Explicit increment per atom, row-major `atom_count × dim`.
    Tabulated(Vec<f64>),
    /// Increment `Φ(ω) ν({ω})`; `Φ` stored row-major.
    Density(Vec<f64>),
    /// Increment `coef(ω) · direction`.
    RankOne { coef: Vec<f64>, direction: Vec<f64> },
    /// Increment `coef(ω) · e_{slot(ω)}`.
    Slot { coef: Vec<f64>, slot: Vec<u32> },
}

/// Finitely additive set function from atom sets into a Banach space,
/// `N(A) = Σ_{ω∈A} N({ω})`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorMeasure {
    space: Arc<DiscreteMeasureSpace>,
    target: SpaceDescriptor,
    realization: Realization,
}

impl VectorMeasure {
    pub fn tabulated(
        space: Arc<DiscreteMeasureSpace>,
        target: SpaceDescriptor,
        increments: &[BanachValue],
    ) -> Result<Self> {
        let flat = flatten(&space, &target, increments)?;
        Ok(Self {
            space,
            target,
            realization: Realization::Tabulated(flat),
        })
    }

    /// `N(A) = Σ_{ω∈A} Φ(ω) ν({ω})`.
    pub fn density(
        space: Arc<DiscreteMeasureSpace>,
        target: SpaceDescriptor,
        phi: &[BanachValue],
    ) -> Result<Self> {
        let flat = flatten(&space, &target, phi)?;
        Ok(Self {
            space,
            target,
            realization: Realization::Density(flat),
        })
    }

    /// Tabulated measure from raw row-major increments.
    pub fn tabulated_raw(
        space: Arc<DiscreteMeasureSpace>,
        target: SpaceDescriptor,
        flat: Vec<f64>,
    ) -> Result<Self> {
        check_flat(&space, &target, &flat)?;
        Ok(Self {
            space,
            target,
            realization: Realization::Tabulated(flat),
        })
    }

    /// The base scalar measure seen as a `Real`-valued vector measure.
    pub fn scalar(space: Arc<DiscreteMeasureSpace>) -> Self {
        let coef = space.weights().to_vec();
        Self {
            space,
            target: SpaceDescriptor::Real,
            realization: Realization::RankOne {
                coef,
                direction: vec![1.0],
            },
        }
    }

    pub fn rank_one(
        space: Arc<DiscreteMeasureSpace>,
        coef: Vec<f64>,
        direction: BanachValue,
    ) -> Result<Self> {
        if coef.len() != space.atom_count() {
            return Err(Error::SpaceMismatch(format!(
                "{} coefficients for {} atoms",
                coef.len(),
                space.atom_count()
            )));
        }
        let target = direction.space().clone();
        Ok(Self {
            space,
            target,
            realization: Realization::RankOne {
                coef,
                direction: direction.into_coords(),
            },
        })
    }

    /// Each atom charges a single coordinate of the target.
    pub fn slot_indicator(
        space: Arc<DiscreteMeasureSpace>,
        target: SpaceDescriptor,
        slot: Vec<u32>,
        coef: Vec<f64>,
    ) -> Result<Self> {
        let n = space.atom_count();
        if slot.len() != n || coef.len() != n {
            return Err(Error::SpaceMismatch(format!(
                "slot data of length {}/{} for {} atoms",
                slot.len(),
                coef.len(),
                n
            )));
        }
        if let Some(s) = slot.iter().find(|&&s| s as usize >= target.dim()) {
            return Err(Error::InvalidArgument(format!(
                "slot {s} out of range for dimension {}",
                target.dim()
            )));
        }
        Ok(Self {
            space,
            target,
            realization: Realization::Slot { coef, slot },
        })
    }

    pub fn space(&self) -> &Arc<DiscreteMeasureSpace> {
        &self.space
    }

    pub fn target(&self) -> &SpaceDescriptor {
        &self.target
    }

    pub fn realization(&self) -> &Realization {
        &self.realization
    }

    pub fn atom_count(&self) -> usize {
        self.space.atom_count()
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// `acc += factor · N({atom})`
    #[inline]
    pub fn accumulate(&self, atom: usize, factor: f64, acc: &mut [f64]) {
        let d = acc.len();
        match &self.realization {
            Realization::Tabulated(flat) => {
                let row = &flat[atom * d..(atom + 1) * d];
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += factor * x;
                }
            }
            Realization::Density(flat) => {
                let f = factor * self.space.weight(atom);
                let row = &flat[atom * d..(atom + 1) * d];
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += f * x;
                }
            }
            Realization::RankOne { coef, direction } => {
                let f = factor * coef[atom];
                for (a, x) in acc.iter_mut().zip(direction) {
                    *a += f * x;
                }
            }
            Realization::Slot { coef, slot } => {
                acc[slot[atom] as usize] += factor * coef[atom];
            }
        }
    }

    /// `acc_c += (factor · N({atom})_c)²` for every coordinate `c`.
    #[inline]
    pub fn accumulate_squares(&self, atom: usize, factor: f64, acc: &mut [f64]) {
        let d = acc.len();
        match &self.realization {
            Realization::Tabulated(flat) => {
                let row = &flat[atom * d..(atom + 1) * d];
                for (a, x) in acc.iter_mut().zip(row) {
                    let v = factor * x;
                    *a += v * v;
                }
            }
            Realization::Density(flat) => {
                let f = factor * self.space.weight(atom);
                let row = &flat[atom * d..(atom + 1) * d];
                for (a, x) in acc.iter_mut().zip(row) {
                    let v = f * x;
                    *a += v * v;
                }
            }
            Realization::RankOne { coef, direction } => {
                let f = factor * coef[atom];
                for (a, x) in acc.iter_mut().zip(direction) {
                    let v = f * x;
                    *a += v * v;
                }
            }
            Realization::Slot { coef, slot } => {
                let v = factor * coef[atom];
                acc[slot[atom] as usize] += v * v;
            }
        }
    }

    pub fn increment(&self, atom: usize) -> BanachValue {
        let mut acc = vec![0.0; self.dim()];
        self.accumulate(atom, 1.0, &mut acc);
        BanachValue::new(self.target.clone(), acc).expect("dimension matches target")
    }

    pub fn increment_norm(&self, atom: usize) -> f64 {
        match &self.realization {
            Realization::RankOne { coef, direction } => {
                coef[atom].abs() * self.target.norm_of(direction)
            }
            _ => self.increment(atom).norm(),
        }
    }

    /// True iff `N({atom})` is the zero element.
    pub fn is_null_atom(&self, atom: usize) -> bool {
        let d = self.dim();
        match &self.realization {
            Realization::Tabulated(flat) => {
                flat[atom * d..(atom + 1) * d].iter().all(|&x| x == 0.0)
            }
            Realization::Density(flat) => {
                self.space.weight(atom) == 0.0
                    || flat[atom * d..(atom + 1) * d].iter().all(|&x| x == 0.0)
            }
            Realization::RankOne { coef, direction } => {
                coef[atom] == 0.0 || direction.iter().all(|&x| x == 0.0)
            }
            Realization::Slot { coef, .. } => coef[atom] == 0.0,
        }
    }

    /// `N(A)`; the empty set maps to zero.
    pub fn measure_of(&self, atoms: &[usize]) -> BanachValue {
        let mut acc = vec![0.0; self.dim()];
        for &a in atoms {
            self.accumulate(a, 1.0, &mut acc);
        }
        BanachValue::new(self.target.clone(), acc).expect("dimension matches target")
    }

    /// `N(Ω)`
    pub fn total(&self) -> BanachValue {
        let mut acc = vec![0.0; self.dim()];
        for a in 0..self.atom_count() {
            self.accumulate(a, 1.0, &mut acc);
        }
        BanachValue::new(self.target.clone(), acc).expect("dimension matches target")
    }

    /// Variation `Σ_{ω∈A} ‖N({ω})‖`, an upper bound on the semivariation.
    pub fn variation_of(&self, atoms: &[usize]) -> f64 {
        atoms.iter().map(|&a| self.increment_norm(a)).sum()
    }

    /// The measure with increments `factor(ω) · N({ω})`. Keeps the storage
    /// layout of `self`.
    pub fn reweighted(&self, factors: &[f64]) -> Result<VectorMeasure> {
        let n = self.atom_count();
        if factors.len() != n {
            return Err(Error::SpaceMismatch(format!(
                "{} factors for {} atoms",
                factors.len(),
                n
            )));
        }
        let d = self.dim();
        let scale_rows = |flat: &[f64]| -> Vec<f64> {
            flat.chunks_exact(d)
                .zip(factors)
                .flat_map(|(row, f)| row.iter().map(move |x| f * x))
                .collect()
        };
        let realization = match &self.realization {
            Realization::Tabulated(flat) => Realization::Tabulated(scale_rows(flat)),
            Realization::Density(flat) => Realization::Density(scale_rows(flat)),
            Realization::RankOne { coef, direction } => Realization::RankOne {
                coef: coef.iter().zip(factors).map(|(c, f)| c * f).collect(),
                direction: direction.clone(),
            },
            Realization::Slot { coef, slot } => Realization::Slot {
                coef: coef.iter().zip(factors).map(|(c, f)| c * f).collect(),
                slot: slot.clone(),
            },
        };
        Ok(Self {
            space: self.space.clone(),
            target: self.target.clone(),
            realization,
        })
    }
}

fn check_flat(space: &DiscreteMeasureSpace, target: &SpaceDescriptor, flat: &[f64]) -> Result<()> {
    if flat.len() != space.atom_count() * target.dim() {
        return Err(Error::SpaceMismatch(format!(
            "{} raw coordinates for {} atoms of dimension {}",
            flat.len(),
            space.atom_count(),
            target.dim()
        )));
    }
    Ok(())
}

fn flatten(
    space: &DiscreteMeasureSpace,
    target: &SpaceDescriptor,
    values: &[BanachValue],
) -> Result<Vec<f64>> {
    if values.len() != space.atom_count() {
        return Err(Error::SpaceMismatch(format!(
            "{} values for {} atoms",
            values.len(),
            space.atom_count()
        )));
    }
    let mut flat = Vec::with_capacity(values.len() * target.dim());
    for v in values {
        target.check_same(v.space())?;
        flat.extend_from_slice(v.coords());
    }
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(n: usize, cells: &[&[usize]]) -> Partition {
        Partition::new(n, cells.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn refine_examples() {
        let a = p(4, &[&[0, 1], &[2, 3]]);
        let b = p(4, &[&[0, 2], &[1, 3]]);
        assert_eq!(a.refine(&b).unwrap(), Partition::atoms(4));
        assert_eq!(a.refine(&a).unwrap(), a);
        assert_eq!(Partition::trivial(4).refine(&b).unwrap(), b);
        assert!(a.refine(&Partition::trivial(5)).is_err());
    }

    #[test]
    fn is_finer_examples() {
        let q = p(3, &[&[0, 1], &[2]]);
        assert!(Partition::atoms(3).is_finer(&q).unwrap());
        assert!(q.is_finer(&q).unwrap());
        assert!(!q.is_finer(&Partition::atoms(3)).unwrap());
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(3, vec![vec![0, 1]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1, 2], vec![]]).is_err());
        assert!(Partition::new(2, vec![vec![0, 1, 2]]).is_err());
        let q = Partition::new(3, vec![vec![2], vec![1, 0]]).unwrap();
        assert_eq!(q.cells(), &[vec![0, 1], vec![2]]);
    }

    #[test]
    fn tagged_partition_checks_membership() {
        let q = p(3, &[&[0, 1], &[2]]);
        assert!(TaggedPartition::new(q.clone(), vec![1, 2]).is_ok());
        assert!(TaggedPartition::new(q.clone(), vec![2, 2]).is_err());
        assert!(TaggedPartition::new(q, vec![0]).is_err());
    }

    #[test]
    fn space_validation() {
        assert!(DiscreteMeasureSpace::new(vec![]).is_err());
        assert!(DiscreteMeasureSpace::new(vec![0.5, -0.1]).is_err());
        let s = DiscreteMeasureSpace::new(vec![0.25; 4]).unwrap();
        assert!(s.is_probability());
        let t = DiscreteMeasureSpace::new(vec![0.0, 2.0]).unwrap();
        assert!(!t.is_probability());
    }

    #[test]
    fn density_measure_of_everything() {
        let space = Arc::new(DiscreteMeasureSpace::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let target = SpaceDescriptor::FiniteDim(4);
        let phi: Vec<BanachValue> = (0..4)
            .map(|i| {
                let mut e = vec![0.0; 4];
                e[i] = 1.0;
                BanachValue::new(target.clone(), e).unwrap()
            })
            .collect();
        let n = VectorMeasure::density(space, target, &phi).unwrap();
        // oracle: Σ_i e_i w_i written out directly
        assert_eq!(n.measure_of(&[0, 1, 2, 3]).coords(), &[0.1, 0.2, 0.3, 0.4]);
        assert!(n.measure_of(&[]).is_zero());
    }

    #[test]
    fn reweighting_preserves_layout() {
        let space = Arc::new(DiscreteMeasureSpace::uniform(3).unwrap());
        let n = VectorMeasure::slot_indicator(
            space,
            SpaceDescriptor::SampleFunction(2),
            vec![0, 1, 1],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        let q = n.reweighted(&[2.0, 0.5, 1.0]).unwrap();
        assert_eq!(q.total().coords(), &[2.0, 4.0]);
        assert!(matches!(q.realization(), Realization::Slot { .. }));
    }

    fn realizations(n: usize) -> Vec<VectorMeasure> {
        let space = Arc::new(
            DiscreteMeasureSpace::new((0..n).map(|i| (i % 5) as f64 * 0.1).collect()).unwrap(),
        );
        let t = SpaceDescriptor::FiniteDim(2);
        let vals: Vec<BanachValue> = (0..n)
            .map(|i| BanachValue::vector(vec![i as f64 - 3.0, (i * i) as f64 * 0.01]).unwrap())
            .collect();
        vec![
            VectorMeasure::tabulated(space.clone(), t.clone(), &vals).unwrap(),
            VectorMeasure::density(space.clone(), t.clone(), &vals).unwrap(),
            VectorMeasure::rank_one(
                space.clone(),
                (0..n).map(|i| (i as f64).sin()).collect(),
                BanachValue::vector(vec![1.0, -2.0]).unwrap(),
            )
            .unwrap(),
            VectorMeasure::slot_indicator(
                space,
                t,
                (0..n).map(|i| (i % 2) as u32).collect(),
                (0..n).map(|i| i as f64).collect(),
            )
            .unwrap(),
        ]
    }

    fn random_partition(n: usize) -> impl Strategy<Value = Partition> {
        proptest::collection::vec(0usize..5, n).prop_map(|l| Partition::from_labels(&l))
    }

    proptest! {
        #[test]
        fn additivity(labels in proptest::collection::vec(0u8..3, 12)) {
            let a: Vec<usize> = (0..12).filter(|&i| labels[i] == 0).collect();
            let b: Vec<usize> = (0..12).filter(|&i| labels[i] == 1).collect();
            let mut ab = a.clone();
            ab.extend(&b);
            for n in realizations(12) {
                let lhs = n.measure_of(&ab);
                let rhs = n.measure_of(&a).add(&n.measure_of(&b)).unwrap();
                prop_assert!(lhs.distance(&rhs).unwrap() <= 1e-12);
            }
        }

        #[test]
        fn refinement_stability(part in random_partition(20)) {
            for n in realizations(20) {
                let mut sum = n.target().zero();
                for c in part.cells() {
                    sum = sum.add(&n.measure_of(c)).unwrap();
                }
                prop_assert!(sum.distance(&n.total()).unwrap() <= 1e-12);
            }
        }

        #[test]
        fn refinement_is_finer_than_both(a in random_partition(15), b in random_partition(15)) {
            let r = a.refine(&b).unwrap();
            prop_assert!(r.is_finer(&a).unwrap());
            prop_assert!(r.is_finer(&b).unwrap());
        }
    }
}
