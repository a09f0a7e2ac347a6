use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-exponential survival function on `(start, ∞)`.
///
/// Piece `i` carries hazard `rates[i]` on `(breaks[i], breaks[i+1]]`; the last
/// piece extends to infinity and `breaks[0]` is the support start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr", into = "CurveRepr")]
pub struct SurvivalCurve {
    breaks: Vec<f64>,
    rates: Vec<f64>,
    // cumulative hazard at each break
    cum: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CurveRepr {
    breaks: Vec<f64>,
    rates: Vec<f64>,
}

impl TryFrom<CurveRepr> for SurvivalCurve {
    type Error = Error;
    fn try_from(r: CurveRepr) -> Result<Self> {
        Self::new(r.breaks, r.rates)
    }
}

impl From<SurvivalCurve> for CurveRepr {
    fn from(c: SurvivalCurve) -> Self {
        CurveRepr { breaks: c.breaks, rates: c.rates }
    }
}

impl SurvivalCurve {
    pub fn new(breaks: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != rates.len() {
            return Err(Error::InvalidConfig("survival curve needs one rate per break".into()));
        }
        if !breaks[0].is_finite() || breaks[0] < 0.0 {
            return Err(Error::InvalidConfig(format!("support start {} must be finite and non-negative", breaks[0])));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidConfig("survival breakpoints must be strictly increasing".into()));
        }
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidConfig("hazard rates must be positive and finite".into()));
        }
        let mut cum = Vec::with_capacity(breaks.len());
        cum.push(0.0);
        for i in 1..breaks.len() {
            cum.push(cum[i - 1] + rates[i - 1] * (breaks[i] - breaks[i - 1]));
        }
        Ok(Self { breaks, rates, cum })
    }

    pub fn exponential(start: f64, rate: f64) -> Result<Self> {
        Self::new(vec![start], vec![rate])
    }

    pub fn start(&self) -> f64 {
        self.breaks[0]
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Index of the piece containing `t`, using the half-open `(b_i, b_{i+1}]` convention.
    pub fn piece_index(&self, t: f64) -> usize {
        self.breaks.partition_point(|&b| b < t).saturating_sub(1)
    }

    pub fn hazard(&self, t: f64) -> f64 {
        self.rates[self.piece_index(t)]
    }

    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        if t <= self.start() {
            return 0.0;
        }
        if t == f64::INFINITY {
            return f64::INFINITY;
        }
        let i = self.piece_index(t);
        self.cum[i] + self.rates[i] * (t - self.breaks[i])
    }

    /// `s(t)`, with `s = 1` at or before the support start and `s(∞) = 0`.
    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative_hazard(t)).exp()
    }

    /// `s(t)` for `t` strictly inside the support.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t > self.start()) {
            return Err(Error::Domain { value: t, lower: self.start() });
        }
        Ok(self.survival(t))
    }

    pub fn density(&self, t: f64) -> f64 {
        if t <= self.start() {
            return 0.0;
        }
        self.hazard(t) * self.survival(t)
    }

    pub fn log_density(&self, t: f64) -> f64 {
        if t <= self.start() {
            return f64::NEG_INFINITY;
        }
        self.hazard(t).ln() - self.cumulative_hazard(t)
    }

    /// Exact inverse of `survival` for `u ∈ (0, 1]`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u <= 1.0) {
            return Err(Error::Domain { value: u, lower: 0.0 });
        }
        Ok(self.quantile_of_hazard(-u.ln()))
    }

    /// Time at which the cumulative hazard reaches `h ≥ 0`.
    pub fn quantile_of_hazard(&self, h: f64) -> f64 {
        let i = self.cum.partition_point(|&c| c <= h).saturating_sub(1);
        self.breaks[i] + (h - self.cum[i]) / self.rates[i]
    }

    /// `∫_a^b x f(x) dx` over `[a, b] ⊂ [start, ∞]`.
    pub fn partial_expectation(&self, a: f64, b: f64) -> f64 {
        let a = a.max(self.start());
        if !(b > a) {
            return 0.0;
        }
        let mut total = 0.0;
        let first = self.piece_index(a);
        for i in first..self.breaks.len() {
            let lo = self.breaks[i].max(a);
            let hi = self.breaks.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
            if hi <= lo {
                if self.breaks[i] >= b {
                    break;
                }
                continue;
            }
            let (s_lo, s_hi) = (self.survival(lo), self.survival(hi));
            let tail = if hi.is_finite() { hi * s_hi } else { 0.0 };
            total += lo * s_lo - tail + (s_lo - s_hi) / self.rates[i];
        }
        total
    }

    pub fn mean(&self) -> f64 {
        self.partial_expectation(self.start(), f64::INFINITY)
    }

    /// The conditional curve `s(t) / s(from)` on `(from, ∞)`.
    pub fn restricted(&self, from: f64) -> Result<Self> {
        if from < self.start() {
            return Err(Error::Domain { value: from, lower: self.start() });
        }
        // piece governing the hazard just after `from`
        let i = self.breaks.partition_point(|&b| b <= from) - 1;
        let mut breaks = vec![from];
        let mut rates = vec![self.rates[i]];
        for j in i + 1..self.breaks.len() {
            if self.breaks[j] > from {
                breaks.push(self.breaks[j]);
                rates.push(self.rates[j]);
            }
        }
        Self::new(breaks, rates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exponential_median() {
        let s = SurvivalCurve::exponential(0.0, 1.0).unwrap();
        assert!((s.eval(2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(s.quantile(1.0).unwrap(), 0.0);
        assert!(s.eval(0.0).is_err());
    }

    #[test]
    fn two_piece_hand_value() {
        let s = SurvivalCurve::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        assert!((s.eval(1.5).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn mean_of_exponential_and_two_piece() {
        let s = SurvivalCurve::exponential(0.0, 2.0).unwrap();
        assert!((s.mean() - 0.5).abs() < 1e-15);
        let s = SurvivalCurve::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        // ∫ S = (1 - e^{-1}) + e^{-1}/2
        let expected = (1.0 - (-1.0f64).exp()) + (-1.0f64).exp() / 2.0;
        assert!((s.mean() - expected).abs() < 1e-14);
    }

    #[test]
    fn restriction_renormalizes() {
        let s = SurvivalCurve::new(vec![0.0, 1.0, 2.0], vec![0.5, 1.0, 3.0]).unwrap();
        for from in [0.0, 0.5, 1.0, 1.5, 2.0, 2.5] {
            let r = s.restricted(from).unwrap();
            for t in [from + 0.1, from + 0.7, from + 2.0] {
                let expected = s.survival(t) / s.survival(from);
                assert!((r.survival(t) - expected).abs() < 1e-14, "from {from} t {t}");
            }
        }
    }

    proptest! {
        #[test]
        fn quantile_inverts_survival(
            rates in proptest::collection::vec(0.05f64..5.0, 1..5),
            gaps in proptest::collection::vec(0.05f64..2.0, 4),
            t in 0.001f64..10.0,
        ) {
            let mut breaks = vec![0.0];
            for g in gaps.iter().take(rates.len() - 1) {
                breaks.push(breaks.last().unwrap() + g);
            }
            let s = SurvivalCurve::new(breaks, rates).unwrap();
            let u = s.eval(t).unwrap();
            prop_assume!(u > 1e-300);
            let back = s.quantile(u).unwrap();
            prop_assert!((back - t).abs() <= 1e-12 * t.max(1.0));
        }
    }
}
