use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared visit schedule `0 = τ_0 < τ_1 < … < τ_K`.
///
/// Intervals are half-open `(τ_k, τ_{k+1}]`; the final interval `(τ_K, ∞)` is
/// open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    taus: Vec<f64>,
}

impl TimeGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.len() < 2 {
            return Err(Error::InvalidGrid("need at least τ_0 and τ_1 (K ≥ 1)".into()));
        }
        if taus[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("τ_0 must be 0, got {}", taus[0])));
        }
        for w in taus.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "visit times must be finite and strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { taus })
    }

    /// Evenly spaced grid `0, step, …, K·step`.
    pub fn uniform(horizon: usize, step: f64) -> Result<Self> {
        Self::new((0..=horizon).map(|k| k as f64 * step).collect())
    }

    /// The horizon `K`.
    pub fn horizon(&self) -> usize {
        self.taus.len() - 1
    }

    pub fn visits(&self) -> usize {
        self.taus.len()
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.taus[k]
    }

    /// `τ_{k+1}`, or `+∞` for the open last interval.
    pub fn upper(&self, k: usize) -> f64 {
        self.taus.get(k + 1).copied().unwrap_or(f64::INFINITY)
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// `p(t)`: the index with `τ_p < t ≤ τ_{p+1}`; `K` for `t > τ_K`.
    pub fn interval_index(&self, t: f64) -> Result<usize> {
        if !(t > 0.0) {
            return Err(Error::Domain { value: t, lower: 0.0 });
        }
        // number of taus strictly below t, minus one
        let below = self.taus.partition_point(|&tau| tau < t);
        Ok(below - 1)
    }

    pub fn check_index(&self, k: usize) -> Result<()> {
        if k > self.horizon() {
            Err(Error::GridBounds { index: k, horizon: self.horizon() })
        } else {
            Ok(())
        }
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(taus: Vec<f64>) -> Result<Self> {
        Self::new(taus)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.taus
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn interval_index_half_open() {
        let g = TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(g.interval_index(0.3).unwrap(), 0);
        assert_eq!(g.interval_index(1.0).unwrap(), 0);
        assert_eq!(g.interval_index(1.0 + 1e-12).unwrap(), 1);
        assert_eq!(g.interval_index(2.0).unwrap(), 1);
        assert_eq!(g.interval_index(7.0).unwrap(), 2);
        assert!(g.interval_index(0.0).is_err());
        assert_eq!(g.upper(2), f64::INFINITY);
    }
}
