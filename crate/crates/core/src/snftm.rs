//! Shift functions `γ^ψ` of the structural nested failure time model and the
//! blip transformations built from them.
//!
//! On visit `k` the shift is piecewise linear:
//! `γ(t) = τ_k + (min(τ_{k+1}, t) − τ_k)·exp(ψ·x_k) + (t − τ_{k+1})⁺`,
//! where `x_k` is the feature vector of the history `(l̄_k, ā_k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::history::{Code, Trajectory};

/// Maps a history `(k, l̄_k, ā_k)` to the covariates of the time-scale exponent.
pub trait FeatureMap: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `x_k` into `out` (length `dim()`); only `covariates[..=k]` and
    /// `treatments[..=k]` are read.
    fn features(&self, k: usize, covariates: &[Code], treatments: &[Code], out: &mut [f64]);

    fn dot(&self, psi: &[f64], k: usize, covariates: &[Code], treatments: &[Code]) -> f64 {
        let mut x = vec![0.0; self.dim()];
        self.features(k, covariates, treatments, &mut x);
        x.iter().zip(psi).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftFeatures {
    /// `(a_k, a_k·a_{k-1}, a_k·l_k)` with `a_{-1} = 0`.
    Standard,
    /// `(a_k)`.
    TreatmentOnly,
}

impl FeatureMap for ShiftFeatures {
    fn dim(&self) -> usize {
        match self {
            Self::Standard => 3,
            Self::TreatmentOnly => 1,
        }
    }

    fn features(&self, k: usize, covariates: &[Code], treatments: &[Code], out: &mut [f64]) {
        let a = treatments[k] as f64;
        out[0] = a;
        if let Self::Standard = self {
            let prev = if k > 0 { treatments[k - 1] as f64 } else { 0.0 };
            out[1] = a * prev;
            out[2] = a * covariates[k] as f64;
        }
    }

    fn dot(&self, psi: &[f64], k: usize, covariates: &[Code], treatments: &[Code]) -> f64 {
        let a = treatments[k] as f64;
        if a == 0.0 {
            return 0.0;
        }
        match self {
            Self::TreatmentOnly => psi[0] * a,
            Self::Standard => {
                let prev = if k > 0 { treatments[k - 1] as f64 } else { 0.0 };
                a * (psi[0] + psi[1] * prev + psi[2] * covariates[k] as f64)
            }
        }
    }
}

/// Result of one step of the sequential inversion used by `blip_up`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlipStep {
    /// The candidate time falls in the current interval: this is the event time.
    Settled(f64),
    /// The candidate lies beyond `τ_{k+1}`; the next visit's history is needed.
    Continue(f64),
}

/// Where the inverse of `γ_k ∘ … ∘ γ_p` places a value relative to interval `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageInverse {
    Below,
    Within(f64),
    Above,
}

/// Blipped-down time with the derivatives the likelihood needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlipDerivatives {
    pub t0: f64,
    /// `log ∂t₀/∂t`.
    pub log_jacobian: f64,
    /// `∂t₀/∂ψ`.
    pub dt0_dpsi: Vec<f64>,
    /// `∂ log(∂t₀/∂t) / ∂ψ`.
    pub dlog_jacobian_dpsi: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ShiftModel<F = ShiftFeatures> {
    grid: TimeGrid,
    psi: Vec<f64>,
    features: F,
}

impl<F: FeatureMap> ShiftModel<F> {
    pub fn new(grid: TimeGrid, psi: Vec<f64>, features: F) -> Result<Self> {
        if psi.len() != features.dim() {
            return Err(Error::InvalidConfig(format!(
                "ψ has {} entries but the feature map has dimension {}",
                psi.len(),
                features.dim()
            )));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("ψ entries must be finite".into()));
        }
        Ok(Self { grid, psi, features })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn feature_map(&self) -> &F {
        &self.features
    }

    pub fn with_psi(&self, psi: Vec<f64>) -> Result<Self>
    where
        F: Clone,
    {
        Self::new(self.grid.clone(), psi, self.features.clone())
    }

    /// `exp(ψ·x_k)`, the slope of `γ_k` on `(τ_k, τ_{k+1}]`.
    pub fn scale(&self, k: usize, covariates: &[Code], treatments: &[Code]) -> f64 {
        self.features.dot(&self.psi, k, covariates, treatments).exp()
    }

    fn check(&self, k: usize, t: f64) -> Result<()> {
        self.grid.check_index(k)?;
        let tau = self.grid.tau(k);
        if !(t > tau) {
            return Err(Error::Domain { value: t, lower: tau });
        }
        Ok(())
    }

    pub fn gamma(&self, k: usize, covariates: &[Code], treatments: &[Code], t: f64) -> Result<f64> {
        self.check(k, t)?;
        Ok(self.gamma_unchecked(k, covariates, treatments, t))
    }

    fn gamma_unchecked(&self, k: usize, covariates: &[Code], treatments: &[Code], t: f64) -> f64 {
        let s = self.scale(k, covariates, treatments);
        shift(self.grid.tau(k), self.grid.upper(k), s, t)
    }

    pub fn gamma_inv(&self, k: usize, covariates: &[Code], treatments: &[Code], y: f64) -> Result<f64> {
        self.check(k, y)?;
        let s = self.scale(k, covariates, treatments);
        Ok(shift_inv(self.grid.tau(k), self.grid.upper(k), s, y))
    }

    /// `γ'(t)`: the slope on `(τ_k, τ_{k+1}]`, 1 beyond.
    pub fn gamma_deriv(&self, k: usize, covariates: &[Code], treatments: &[Code], t: f64) -> Result<f64> {
        self.check(k, t)?;
        if t <= self.grid.upper(k) {
            Ok(self.scale(k, covariates, treatments))
        } else {
            Ok(1.0)
        }
    }

    /// `T_k^γ = γ_k ∘ … ∘ γ_{p(T)}(T)`; `T` itself when `k > p(T)`.
    pub fn blip_down(&self, traj: &Trajectory, k: usize) -> f64 {
        let p = traj.last_visit();
        let mut v = traj.event_time;
        if k > p {
            return v;
        }
        for m in (k..=p).rev() {
            v = self.gamma_unchecked(m, &traj.covariates, &traj.treatments, v);
        }
        v
    }

    /// One step of the inversion: `v = γ_k⁻¹(v)`, settled when `v ≤ τ_{k+1}`.
    pub fn blip_up_step(&self, k: usize, covariates: &[Code], treatments: &[Code], v: f64) -> Result<BlipStep> {
        let y = self.gamma_inv(k, covariates, treatments, v)?;
        if y <= self.grid.upper(k) {
            Ok(BlipStep::Settled(y))
        } else {
            Ok(BlipStep::Continue(y))
        }
    }

    /// The event time whose blipped-down value is `t0`, given enough history.
    pub fn blip_up(&self, t0: f64, covariates: &[Code], treatments: &[Code]) -> Result<f64> {
        if !(t0 > 0.0) {
            return Err(Error::Domain { value: t0, lower: 0.0 });
        }
        let mut v = t0;
        for k in 0..=self.grid.horizon() {
            if k >= covariates.len() || k >= treatments.len() {
                return Err(Error::InsufficientHistory { visit: k });
            }
            match self.blip_up_step(k, covariates, treatments, v)? {
                BlipStep::Settled(t) => return Ok(t),
                BlipStep::Continue(next) => v = next,
            }
        }
        unreachable!("the last interval is unbounded")
    }

    /// Inverse of `γ_k ∘ … ∘ γ_p` restricted to interval `p`.
    pub fn stage_inverse(&self, k: usize, p: usize, covariates: &[Code], treatments: &[Code], y: f64) -> StageInverse {
        if !(y > self.grid.tau(k)) {
            return StageInverse::Below;
        }
        let mut u = y;
        for m in k..=p {
            let s = self.scale(m, covariates, treatments);
            u = shift_inv(self.grid.tau(m), self.grid.upper(m), s, u);
            let up = self.grid.upper(m);
            if m < p && u <= up {
                return StageInverse::Below;
            }
            if m == p && u > up {
                return StageInverse::Above;
            }
        }
        StageInverse::Within(u)
    }

    /// `(α, β)` with `γ_0 ∘ … ∘ γ_p(t) = α + β·t` for `t ∈ (τ_p, τ_{p+1}]`.
    pub fn stage_affine(&self, p: usize, covariates: &[Code], treatments: &[Code]) -> (f64, f64) {
        let mut offset = 0.0;
        for j in 0..p {
            offset += (self.scale(j, covariates, treatments) - 1.0) * (self.grid.tau(j + 1) - self.grid.tau(j));
        }
        let s = self.scale(p, covariates, treatments);
        let tau = self.grid.tau(p);
        (tau + offset - s * tau, s)
    }

    /// `t₀^γ` together with its Jacobian and ψ-derivatives, by forward-mode
    /// differentiation of the composition.
    pub fn blip_down_with_derivatives(&self, traj: &Trajectory) -> BlipDerivatives {
        let d = self.features.dim();
        let p = traj.last_visit();
        let mut x = vec![0.0; d];
        let mut u = traj.event_time;
        let mut du = vec![0.0; d];
        let mut log_jacobian = 0.0;
        let mut dlog = vec![0.0; d];
        for m in (0..=p).rev() {
            self.features.features(m, &traj.covariates, &traj.treatments, &mut x);
            let s: f64 = x.iter().zip(&self.psi).map(|(a, b)| a * b).sum::<f64>().exp();
            let (tau, up) = (self.grid.tau(m), self.grid.upper(m));
            let inside = u <= up;
            let slope = if inside { s } else { 1.0 };
            let stretch = (u.min(up) - tau) * s;
            for j in 0..d {
                du[j] = slope * du[j] + stretch * x[j];
            }
            if inside {
                log_jacobian += s.ln();
                for j in 0..d {
                    dlog[j] += x[j];
                }
            }
            u = shift(tau, up, s, u);
        }
        BlipDerivatives { t0: u, log_jacobian, dt0_dpsi: du, dlog_jacobian_dpsi: dlog }
    }
}

/// `γ` with lower knot `tau`, upper knot `up` and slope `s`.
pub fn shift(tau: f64, up: f64, s: f64, t: f64) -> f64 {
    if t <= up {
        tau + (t - tau) * s
    } else {
        tau + (up - tau) * s + (t - up)
    }
}

pub fn shift_inv(tau: f64, up: f64, s: f64, y: f64) -> f64 {
    let knot = if up.is_finite() { tau + (up - tau) * s } else { f64::INFINITY };
    if y <= knot {
        tau + (y - tau) / s
    } else {
        up + (y - knot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn half_scale_model() -> ShiftModel {
        // single feature a_k with ψ = ln 0.5
        ShiftModel::new(TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap(), vec![0.5f64.ln()], ShiftFeatures::TreatmentOnly).unwrap()
    }

    #[test]
    fn hand_values_on_second_interval() {
        let m = half_scale_model();
        let (l, a) = ([0, 0], [0, 1]);
        assert!((m.gamma(1, &l, &a, 1.5).unwrap() - 1.25).abs() < 1e-15);
        assert!((m.gamma(1, &l, &a, 3.0).unwrap() - 2.5).abs() < 1e-15);
        assert!((m.gamma_inv(1, &l, &a, 1.25).unwrap() - 1.5).abs() < 1e-15);
        assert!((m.gamma_deriv(1, &l, &a, 1.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.gamma_deriv(1, &l, &a, 3.0).unwrap(), 1.0);
        assert!(m.gamma(1, &l, &a, 1.0).is_err());
    }

    #[test]
    fn untreated_visit_is_identity() {
        let m = half_scale_model();
        assert_eq!(m.gamma(0, &[1], &[0], 0.7).unwrap(), 0.7);
    }

    #[test]
    fn blip_down_and_up_single_interval() {
        let m = half_scale_model();
        let traj = Trajectory::new(m.grid(), vec![0], vec![1], 0.5).unwrap();
        assert!((m.blip_down(&traj, 0) - 0.25).abs() < 1e-15);
        assert_eq!(m.blip_down(&traj, 1), 0.5);
        assert!((m.blip_up(0.25, &[0], &[1]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blip_up_needs_history() {
        let m = half_scale_model();
        // 0.9 maps to 1.8 > τ_1 on visit 0, so visit 1 is required
        assert!(matches!(m.blip_up(0.9, &[0], &[1]), Err(Error::InsufficientHistory { visit: 1 })));
    }

    #[test]
    fn zero_psi_is_identity() {
        let m = ShiftModel::new(TimeGrid::new(vec![0.0, 1.0]).unwrap(), vec![0.0; 3], ShiftFeatures::Standard).unwrap();
        for t in [0.1, 1.0, 3.7] {
            assert_eq!(m.gamma(0, &[1], &[1], t).unwrap(), t);
            assert_eq!(m.gamma_inv(0, &[1], &[1], t).unwrap(), t);
            assert_eq!(m.blip_up(t, &[1, 0], &[1, 1]).unwrap(), t);
        }
    }

    fn arb_model() -> impl Strategy<Value = (ShiftModel, Vec<Code>, Vec<Code>)> {
        (
            proptest::collection::vec(0.05f64..1.5, 1..5),
            proptest::collection::vec(-1.0f64..1.0, 3),
            proptest::collection::vec(0u32..2, 6),
            proptest::collection::vec(0u32..2, 6),
        )
            .prop_map(|(gaps, psi, l, a)| {
                let mut taus = vec![0.0];
                for g in gaps {
                    taus.push(taus.last().unwrap() + g);
                }
                let grid = TimeGrid::new(taus).unwrap();
                let n = grid.visits();
                (ShiftModel::new(grid, psi, ShiftFeatures::Standard).unwrap(), l[..n].to_vec(), a[..n].to_vec())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn gamma_inverse_round_trip((m, l, a) in arb_model(), k_raw in 0usize..5, offset in 1e-6f64..6.0) {
            let k = k_raw % m.grid().visits();
            let t = m.grid().tau(k) + offset;
            let y = m.gamma(k, &l, &a, t).unwrap();
            prop_assert!(y > m.grid().tau(k));
            let back = m.gamma_inv(k, &l, &a, y).unwrap();
            prop_assert!((back - t).abs() <= 1e-14 * t.max(1.0));
            let t2 = t + 0.01;
            prop_assert!(m.gamma(k, &l, &a, t2).unwrap() > y);
        }

        #[test]
        fn blip_up_then_down((m, l, a) in arb_model(), t0 in 1e-4f64..8.0) {
            let t = m.blip_up(t0, &l, &a).unwrap();
            let p = m.grid().interval_index(t).unwrap();
            let traj = Trajectory::new(m.grid(), l[..=p].to_vec(), a[..=p].to_vec(), t).unwrap();
            let back = m.blip_down(&traj, 0);
            prop_assert!((back - t0).abs() <= 1e-12 * t0.max(1.0));
            let (alpha, beta) = m.stage_affine(p, &l, &a);
            prop_assert!((alpha + beta * t - t0).abs() <= 1e-12 * t0.max(1.0));
            prop_assert_eq!(m.stage_inverse(0, p, &l, &a, t0), StageInverse::Within(t));
        }
    }

    #[test]
    fn forward_derivatives_match_finite_differences() {
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        let psi = vec![0.4, -0.3, 0.2];
        let m = ShiftModel::new(grid.clone(), psi.clone(), ShiftFeatures::Standard).unwrap();
        let traj = Trajectory::new(&grid, vec![1, 0, 1], vec![1, 1, 0], 1.2).unwrap();
        let d = m.blip_down_with_derivatives(&traj);
        assert!((d.t0 - m.blip_down(&traj, 0)).abs() < 1e-15);
        let h = 1e-6;
        for j in 0..3 {
            let mut up = psi.clone();
            up[j] += h;
            let mut dn = psi.clone();
            dn[j] -= h;
            let fd = (m.with_psi(up).unwrap().blip_down(&traj, 0) - m.with_psi(dn).unwrap().blip_down(&traj, 0)) / (2.0 * h);
            assert!((fd - d.dt0_dpsi[j]).abs() < 1e-8, "component {j}: {fd} vs {}", d.dt0_dpsi[j]);
        }
    }
}
