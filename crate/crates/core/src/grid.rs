//! Equal-volume binning of a one-dimensional domain and the observed counts.

use crate::error::{Error, Result};

/// A partition of `[lo, hi]` into `K` bins of common width `delta`.
///
/// Centers are strictly increasing; this left-to-right order is also the
/// default scanning order used by the partial-sum processes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: f64,
    hi: f64,
    k: usize,
    delta: f64,
    centers: Vec<f64>,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, k: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::Validation(format!(
                "invalid domain [{lo}, {hi}]"
            )));
        }
        if k == 0 {
            return Err(Error::Validation("bin count K must be positive".into()));
        }
        let delta = (hi - lo) / k as f64;
        let centers = (0..k)
            .map(|i| lo + (i as f64 + 0.5) * delta)
            .collect::<Vec<_>>();
        let grid = Grid { lo, hi, k, delta, centers };
        debug_assert!((grid.delta * k as f64 - grid.volume()).abs() <= 1e-12 * grid.volume());
        Ok(grid)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Number of bins K.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Common bin volume delta = |X| / K.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn center(&self, idx: usize) -> f64 {
        self.centers[idx]
    }

    /// Bin edges `(lo_k, hi_k)` of bin `idx`.
    pub fn edges(&self, idx: usize) -> (f64, f64) {
        (self.lo + idx as f64 * self.delta, self.lo + (idx + 1) as f64 * self.delta)
    }

    /// Domain volume |X|.
    pub fn volume(&self) -> f64 {
        self.hi - self.lo
    }

    /// Index of the bin whose center is nearest to `x`.
    pub fn index_of(&self, x: f64) -> usize {
        let raw = ((x - self.lo) / self.delta).floor();
        (raw.max(0.0) as usize).min(self.k - 1)
    }
}

/// Observed frequencies, one nonnegative count per bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinnedCounts(pub Vec<u64>);

impl BinnedCounts {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        if self.len() != grid.k() {
            return Err(Error::Validation(format!(
                "counts length {} does not match K = {}",
                self.len(),
                grid.k()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_exact() {
        let g = Grid::new(0.0, 1.0, 100).unwrap();
        assert_eq!(g.k(), 100);
        assert!((g.delta() * 100.0 - 1.0).abs() < 1e-15);
        assert!((g.center(0) - 0.005).abs() < 1e-15);
        // centers strictly ordered
        for w in g.centers().windows(2) {
            assert!(w[0] < w[1]);
        }
        assert_eq!(g.index_of(0.004), 0);
        assert_eq!(g.index_of(0.999), 99);
        let (a, b) = g.edges(3);
        assert!((a - 0.03).abs() < 1e-15 && (b - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_domain() {
        assert!(Grid::new(1.0, 1.0, 10).is_err());
        assert!(Grid::new(0.0, 1.0, 0).is_err());
        assert!(Grid::new(f64::NAN, 1.0, 10).is_err());
    }

    #[test]
    fn counts_length_checked() {
        let g = Grid::new(0.0, 1.0, 3).unwrap();
        assert!(BinnedCounts(vec![1, 2]).check_grid(&g).is_err());
        assert!(BinnedCounts(vec![1, 2, 0]).check_grid(&g).is_ok());
    }
}
