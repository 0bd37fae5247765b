//! Randomized finite instances checked against plain atom sums.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::banach::{BanachValue, SpaceDescriptor, TimeGrid};
use crate::bins::BinEdges;
use crate::birkhoff::{bi1_integrate, bi2_integrate, check_duality, check_substitution};
use crate::conditioning::{check_defining_identity, check_pullout, check_tower};
use crate::error::Result;
use crate::measure::{DiscreteMeasureSpace, Partition, VectorMeasure};
use crate::rng::stream;

const TOL: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct OracleRow {
    pub family: &'static str,
    pub instance: usize,
    pub space: &'static str,
    pub atoms: usize,
    /// Gap divided by `max(1, ‖oracle‖)`.
    pub gap: f64,
}

fn random_space(rng: &mut ChaCha8Rng) -> Result<SpaceDescriptor> {
    Ok(match rng.random_range(0..4) {
        0 => SpaceDescriptor::Real,
        1 => SpaceDescriptor::finite_dim(rng.random_range(1..=5))?,
        2 => SpaceDescriptor::GridFunction(TimeGrid::uniform(rng.random_range(1..=8), 1.0)?),
        _ => SpaceDescriptor::sample_function(rng.random_range(1..=6))?,
    })
}

fn random_value(space: &SpaceDescriptor, rng: &mut ChaCha8Rng) -> Result<BanachValue> {
    let coords = (0..space.dim())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    BanachValue::new(space.clone(), coords)
}

fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> Result<Arc<DiscreteMeasureSpace>> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    Ok(Arc::new(DiscreteMeasureSpace::new(w)?))
}

fn random_measure(
    space: Arc<DiscreteMeasureSpace>,
    target: &SpaceDescriptor,
    rng: &mut ChaCha8Rng,
) -> Result<VectorMeasure> {
    let n = space.atom_count();
    match rng.random_range(0..4) {
        0 => {
            let inc = (0..n)
                .map(|_| random_value(target, rng))
                .collect::<Result<Vec<_>>>()?;
            VectorMeasure::tabulated(space, target.clone(), &inc)
        }
        1 => {
            let phi = (0..n)
                .map(|_| random_value(target, rng))
                .collect::<Result<Vec<_>>>()?;
            VectorMeasure::density(space, target.clone(), &phi)
        }
        2 => {
            let coef = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dir = random_value(target, rng)?;
            VectorMeasure::rank_one(space, coef, dir)
        }
        _ => {
            let d = target.dim() as u32;
            let slot = (0..n).map(|_| rng.random_range(0..d)).collect();
            let coef = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            VectorMeasure::slot_indicator(space, target.clone(), slot, coef)
        }
    }
}

/// Labels with at most `cells` distinct values.
fn random_labels(n: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..cells.max(1))).collect()
}

fn rel(gap: f64, oracle: &BanachValue) -> f64 {
    gap / oracle.norm().max(1.0)
}

fn plain_bi1(phi: &[BanachValue], w: &DiscreteMeasureSpace) -> Result<BanachValue> {
    let mut acc = phi[0].space().zero();
    for (v, &m) in phi.iter().zip(w.weights()) {
        acc = acc.add(&v.scale(m))?;
    }
    Ok(acc)
}

fn plain_bi2(phi: &[f64], n: &VectorMeasure) -> Result<BanachValue> {
    let mut acc = n.target().zero();
    for (a, &s) in phi.iter().enumerate() {
        acc = acc.add(&n.increment(a).scale(s))?;
    }
    Ok(acc)
}

/// `instances` cases per integral family and half as many per identity.
pub fn run_oracles(seed: u64, instances: usize) -> Result<Vec<OracleRow>> {
    let mut rng = stream(seed, "oracles");
    let mut rows = Vec::new();
    for i in 0..instances {
        let n = rng.random_range(1..=256);
        let target = random_space(&mut rng)?;
        let w = random_weights(n, &mut rng)?;
        let phi = (0..n)
            .map(|_| random_value(&target, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let r = bi1_integrate(&phi, &w, TOL)?;
        let oracle = plain_bi1(&phi, &w)?;
        rows.push(OracleRow {
            family: "bi1",
            instance: i,
            space: target.name(),
            atoms: n,
            gap: rel(r.value.distance(&oracle)?, &oracle),
        });

        let meas = random_measure(w.clone(), &target, &mut rng)?;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = bi2_integrate(&s, &meas, TOL)?;
        let oracle = plain_bi2(&s, &meas)?;
        rows.push(OracleRow {
            family: "bi2",
            instance: i,
            space: target.name(),
            atoms: n,
            gap: rel(r.value.distance(&oracle)?, &oracle),
        });
    }
    for i in 0..instances.div_ceil(2) {
        let n = rng.random_range(1..=256);
        let target = random_space(&mut rng)?;
        let w = random_weights(n, &mut rng)?;
        let big = (0..n)
            .map(|_| random_value(&target, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c = check_duality(&s, &big, &w, TOL)?;
        rows.push(OracleRow {
            family: "duality",
            instance: i,
            space: target.name(),
            atoms: n,
            gap: rel(c.gap, &c.lhs.value),
        });

        let meas = random_measure(w.clone(), &target, &mut rng)?;
        let distinct = rng.random_range(1..=16);
        let levels: Vec<f64> = (0..distinct)
            .map(|k| k as f64 + rng.random_range(0.0..0.5))
            .collect();
        let phi: Vec<f64> = (0..n)
            .map(|_| levels[rng.random_range(0..distinct)])
            .collect();
        let mut edges: Vec<f64> = (0..=distinct).map(|k| k as f64 - 0.25).collect();
        edges[distinct] = distinct as f64;
        let bins = BinEdges::new(edges)?;
        let sub = check_substitution(|x| (x * 0.7).sin() + x * x, &phi, &meas, &bins, TOL)?;
        rows.push(OracleRow {
            family: "substitution",
            instance: i,
            space: target.name(),
            atoms: n,
            gap: rel(sub.comparison.gap, &sub.comparison.lhs.value),
        });

        let coarse = Partition::from_labels(&random_labels(n, rng.random_range(1..=8), &mut rng));
        let split = Partition::from_labels(&random_labels(n, rng.random_range(1..=4), &mut rng));
        let fine = coarse.refine(&split)?;
        let gap = check_defining_identity(&big, &w, &fine)?;
        rows.push(OracleRow {
            family: "defining_identity",
            instance: i,
            space: target.name(),
            atoms: n,
            gap,
        });
        let gap = check_tower(&big, &w, &coarse, &fine)?;
        rows.push(OracleRow {
            family: "tower",
            instance: i,
            space: target.name(),
            atoms: n,
            gap,
        });
        let mut levels: Vec<f64> = (0..coarse.len()).map(|k| k as f64 - 1.5).collect();
        levels.shuffle(&mut rng);
        let mut factor = vec![0.0; n];
        for (cell, &v) in coarse.cells().iter().zip(&levels) {
            for &a in cell {
                factor[a] = v;
            }
        }
        let gap = check_pullout(&big, &factor, &w, &coarse)?;
        rows.push(OracleRow {
            family: "pullout",
            instance: i,
            space: target.name(),
            atoms: n,
            gap,
        });
    }
    Ok(rows)
}
