//! Bin edges over the real line and quantile edge construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted bin edges `e_0 < e_1 < ... < e_B`. Bin `k` is `[e_k, e_{k+1})`,
/// except the last bin which is closed on the right. Edges may be infinite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    edges: Vec<f64>,
}

impl BinEdges {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidArgument("need at least two bin edges".into()));
        }
        if edges.iter().any(|e| e.is_nan()) {
            return Err(Error::InvalidArgument("bin edges contain NaN".into()));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "bin edges must be strictly increasing".into(),
            ));
        }
        Ok(Self { edges })
    }

    /// `bins` equal-width bins on `[low, high]`.
    pub fn uniform(low: f64, high: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(high > low) {
            return Err(Error::InvalidArgument(format!(
                "cannot build {bins} bins on [{low}, {high}]"
            )));
        }
        let w = (high - low) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|k| low + k as f64 * w).collect();
        edges[bins] = high;
        Self::new(edges)
    }

    /// Quantile edges of `values` with at most `bins` bins. The outer edges are
    /// the sample min and max; repeated quantiles are merged, so discrete data
    /// yields fewer bins.
    pub fn quantiles(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(Error::InvalidArgument(
                "quantile bins need data and at least one bin".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite value in quantile data".into(),
            ));
        }
        let mut edges = quantile_cuts(values, bins);
        edges.dedup();
        if edges.len() < 2 {
            // constant data: a single degenerate value gets one unit-width bin
            let c = edges[0];
            let pad = 0.5 * c.abs().max(1.0);
            edges = vec![c - pad, c + pad];
        }
        Self::new(edges)
    }

    /// Like [`BinEdges::quantiles`], with the outer edges pushed to `±∞` so
    /// that any finite value is covered.
    pub fn quantiles_open(values: &[f64], bins: usize) -> Result<Self> {
        let mut e = Self::quantiles(values, bins)?.edges;
        let n = e.len();
        e[0] = f64::NEG_INFINITY;
        e[n - 1] = f64::INFINITY;
        Self::new(e)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn low(&self) -> f64 {
        self.edges[0]
    }

    pub fn high(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        (self.edges[bin], self.edges[bin + 1])
    }

    pub fn width(&self, bin: usize) -> f64 {
        self.edges[bin + 1] - self.edges[bin]
    }

    pub fn locate(&self, x: f64) -> Option<usize> {
        let n = self.edges.len();
        if x.is_nan() || x < self.edges[0] || x > self.edges[n - 1] {
            return None;
        }
        let pos = self.edges.partition_point(|&e| e <= x);
        Some(pos.clamp(1, n - 1) - 1)
    }

    pub fn locate_or_err(&self, x: f64) -> Result<usize> {
        self.locate(x).ok_or(Error::OutOfRange {
            value: x,
            low: self.low(),
            high: self.high(),
        })
    }
}

/// Order statistics at ranks `floor(k n / B)` for `k = 1..B-1`, plus min and
/// max. Uses repeated selection, `O(n log B)`.
fn quantile_cuts(values: &[f64], bins: usize) -> Vec<f64> {
    let n = values.len();
    let mut buf = values.to_vec();
    let mut ranks: Vec<usize> = (1..bins).map(|k| k * n / bins).filter(|&r| r < n).collect();
    ranks.dedup();
    let mut cuts = vec![0.0; ranks.len()];
    select_ranks(&mut buf, 0, &ranks, &mut cuts);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(cuts.len() + 2);
    out.push(min);
    out.extend(cuts.into_iter().filter(|&c| c > min && c < max));
    out.push(max);
    out
}

fn select_ranks(buf: &mut [f64], offset: usize, ranks: &[usize], out: &mut [f64]) {
    if ranks.is_empty() {
        return;
    }
    let mid = ranks.len() / 2;
    let r = ranks[mid] - offset;
    let (left, pivot, right) = buf.select_nth_unstable_by(r, f64::total_cmp);
    out[mid] = *pivot;
    let (lo_ranks, rest) = ranks.split_at(mid);
    let (lo_out, rest_out) = out.split_at_mut(mid);
    select_ranks(left, offset, lo_ranks, lo_out);
    select_ranks(right, offset + r + 1, &rest[1..], &mut rest_out[1..]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locate_half_open_with_closed_last_bin() {
        let b = BinEdges::new(vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(b.locate(0.0), Some(0));
        assert_eq!(b.locate(1.999), Some(0));
        assert_eq!(b.locate(2.0), Some(1));
        assert_eq!(b.locate(4.0), Some(1));
        assert_eq!(b.locate(4.1), None);
        assert_eq!(b.locate(-0.1), None);
        assert!(matches!(
            b.locate_or_err(5.0),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn quantiles_match_sorted_order_statistics() {
        let values: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let b = BinEdges::quantiles(&values, 4).unwrap();
        assert_eq!(b.edges(), &[0.0, 250.0, 500.0, 750.0, 999.0]);
        for &v in &values {
            assert!(b.locate(v).is_some());
        }
    }

    #[test]
    fn quantiles_merge_ties() {
        let values = vec![1.0, 1.0, 1.0, 2.0];
        let b = BinEdges::quantiles(&values, 4).unwrap();
        assert_eq!(b.edges(), &[1.0, 2.0]);
        let c = BinEdges::quantiles(&[3.0, 3.0], 8).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.locate(3.0).is_some());
    }

    #[test]
    fn open_quantiles_cover_everything() {
        let values: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b = BinEdges::quantiles_open(&values, 10).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(b.locate(-1e9), Some(0));
        assert_eq!(b.locate(1e9), Some(9));
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(BinEdges::new(vec![1.0]).is_err());
        assert!(BinEdges::new(vec![1.0, 1.0]).is_err());
        assert!(BinEdges::new(vec![0.0, f64::NAN]).is_err());
    }
}
