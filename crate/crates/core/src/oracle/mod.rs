//! Exact, sampling-free realization of a [`Dgp`] on small instances.
//!
//! Every quantity is a finite sum over (covariate path, treatment path,
//! prognosis bin) cells of closed-form piecewise-exponential masses.

mod verify;

pub use verify::{
    run_suite, verify_blip_theorems, verify_gcomputation, verify_null_equivalence, CheckReport, RegimeSet, Suite,
    SuiteOptions, SuiteReport, REPORT_SCHEMA_VERSION,
};

use std::collections::{BTreeMap, BTreeSet};

use crate::dgp::Dgp;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::history::{for_each_sequence, Code, Trajectory};
use crate::laws::{ConditionalLaws, HistoryKey, IntervalSurvival, MixtureTerm};
use crate::regime::{JointLaw, TreatmentRegime};

/// Atom budget for oracle instances.
pub const ORACLE_ATOM_GUARD: u128 = 1_000_000;

#[derive(Debug, Clone)]
pub struct EnumeratedWorld {
    dgp: Dgp,
    edges: Vec<f64>,
    atoms: u128,
}

impl EnumeratedWorld {
    pub fn new(dgp: Dgp) -> Result<Self> {
        Self::with_guard(dgp, ORACLE_ATOM_GUARD)
    }

    pub fn with_guard(dgp: Dgp, guard: u128) -> Result<Self> {
        let atoms = Self::atom_count(&dgp);
        if atoms > guard {
            return Err(Error::InstanceTooLarge { cells: atoms, guard });
        }
        let edges = dgp.bin_edges();
        Ok(Self { dgp, edges, atoms })
    }

    /// Number of `(l̄_k, ā_k, bin)` atoms over all visits.
    pub fn atom_count(dgp: &Dgp) -> u128 {
        let cfg = dgp.config();
        let per_visit = cfg.covariate_levels as u128 * cfg.treatment_levels as u128;
        let mut total: u128 = 0;
        let mut layer: u128 = 1;
        for _ in 0..=cfg.grid.horizon() {
            layer = layer.saturating_mul(per_visit);
            total = total.saturating_add(layer);
        }
        total.saturating_mul(dgp.bins() as u128)
    }

    pub fn atoms(&self) -> u128 {
        self.atoms
    }

    pub fn dgp(&self) -> &Dgp {
        &self.dgp
    }

    pub fn grid(&self) -> &TimeGrid {
        self.dgp.grid()
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    fn covariate_size(&self) -> Code {
        self.dgp.config().covariate_levels
    }

    fn treatment_size(&self) -> Code {
        self.dgp.config().treatment_levels
    }

    /// `P(bin(T₀) = b, T₀ > x)`.
    pub fn bin_tail(&self, b: usize, x: f64) -> f64 {
        let s = &self.dgp.config().baseline;
        let (lo, hi) = (self.edges[b], self.edges[b + 1]);
        s.survival(x.clamp(lo, hi)) - s.survival(hi)
    }

    /// Per-bin products `Π_{m ≤ k} P(L_m = l_m | bin, l̄_{m-1}, ā_{m-1})`.
    pub fn covariate_weights(&self, covariates: &[Code], treatments: &[Code]) -> Vec<f64> {
        let mut w = vec![1.0; self.bins()];
        let mut probs = Vec::new();
        for m in 0..covariates.len() {
            for (b, wb) in w.iter_mut().enumerate() {
                if *wb == 0.0 {
                    continue;
                }
                self.dgp.covariate_probabilities(m, b, &covariates[..m], &treatments[..m], &mut probs);
                *wb *= probs[covariates[m] as usize];
            }
        }
        w
    }

    /// `Π_{m ≤ k} P(A_m = a_m | l̄_m, ā_{m-1})`.
    pub fn treatment_weight(&self, covariates: &[Code], treatments: &[Code]) -> f64 {
        let mut probs = Vec::new();
        let mut w = 1.0;
        for m in 0..treatments.len() {
            self.dgp.treatment_probabilities(&covariates[..=m], &treatments[..m], &mut probs);
            w *= probs[treatments[m] as usize];
        }
        w
    }

    /// `H_k = γ_0 ∘ … ∘ γ_{k-1}(τ_k)`: the baseline time above which a subject
    /// with history `(l̄_{k-1}, ā_{k-1})` is still alive at `τ_k`.
    pub fn at_risk_threshold(&self, covariates: &[Code], treatments: &[Code]) -> f64 {
        let k = covariates.len();
        if k == 0 {
            return 0.0;
        }
        let (alpha, beta) = self.dgp.model().stage_affine(k - 1, covariates, treatments);
        alpha + beta * self.grid().tau(k)
    }

    fn at_risk_by_bin(&self, covariates: &[Code], treatments: &[Code]) -> Vec<f64> {
        let k = covariates.len() - 1;
        let h = self.at_risk_threshold(&covariates[..k], &treatments[..k]);
        self.covariate_weights(covariates, treatments)
            .iter()
            .enumerate()
            .map(|(b, w)| w * self.bin_tail(b, h))
            .collect()
    }

    /// `P(L̄_k = l̄_k, Ā_k = ā_k, T > τ_k)`.
    pub fn at_risk(&self, covariates: &[Code], treatments: &[Code]) -> f64 {
        let tw = self.treatment_weight(covariates, treatments);
        if tw == 0.0 {
            return 0.0;
        }
        tw * self.at_risk_by_bin(covariates, treatments).iter().sum::<f64>()
    }

    /// `P(T > t | l̄_k, ā_k, T > τ_k)` on `(τ_k, τ_{k+1}]`, or `None` for a
    /// null cell.
    pub fn interval_survival(&self, covariates: &[Code], treatments: &[Code]) -> Option<IntervalSurvival> {
        let k = covariates.len() - 1;
        let by_bin = self.at_risk_by_bin(covariates, treatments);
        let norm: f64 = by_bin.iter().sum();
        if !(norm > 0.0) || self.treatment_weight(covariates, treatments) == 0.0 {
            return None;
        }
        let weights = self.covariate_weights(covariates, treatments);
        let (offset, slope) = self.dgp.model().stage_affine(k, covariates, treatments);
        let terms = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(b, &w)| MixtureTerm {
                weight: w,
                lo: self.edges[b],
                hi: self.edges[b + 1].is_finite().then_some(self.edges[b + 1]),
            })
            .collect();
        let up = self.grid().upper(k);
        Some(IntervalSurvival::BinMixture {
            start: self.grid().tau(k),
            end: up.is_finite().then_some(up),
            offset,
            slope,
            baseline: self.dgp.config().baseline.clone(),
            terms,
            norm,
        })
    }

    /// `P(L_m = · | l̄_{m-1}, ā_{m-1}, T > τ_m)` with `m = covariates.len()`,
    /// or `None` when the conditioning event is null.
    pub fn covariate_transition(&self, covariates: &[Code], treatments: &[Code]) -> Option<Vec<f64>> {
        let m = covariates.len();
        if self.treatment_weight(covariates, treatments) == 0.0 {
            return None;
        }
        let h = self.at_risk_threshold(covariates, treatments);
        let weights = self.covariate_weights(covariates, treatments);
        let mut out = vec![0.0; self.covariate_size() as usize];
        let mut probs = Vec::new();
        for (b, &w) in weights.iter().enumerate() {
            let mass = w * self.bin_tail(b, h);
            if mass == 0.0 {
                continue;
            }
            self.dgp.covariate_probabilities(m, b, covariates, treatments, &mut probs);
            for (o, p) in out.iter_mut().zip(&probs) {
                *o += mass * p;
            }
        }
        let total: f64 = out.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        out.iter_mut().for_each(|v| *v /= total);
        Some(out)
    }

    /// The exact G-computation ingredients of this world.
    pub fn conditional_laws(&self) -> Result<ConditionalLaws> {
        let mut transitions = BTreeMap::new();
        let mut survival = BTreeMap::new();
        let mut support = BTreeSet::new();
        let (nl, na) = (self.covariate_size(), self.treatment_size());
        if let Some(p) = self.covariate_transition(&[], &[]) {
            transitions.insert(HistoryKey::new(&[], &[]), p);
        }
        for k in 0..=self.grid().horizon() {
            for_each_sequence(nl, k + 1, |l| {
                for_each_sequence(na, k + 1, |a| {
                    if self.at_risk(l, a) <= 0.0 {
                        return;
                    }
                    if let Some(curve) = self.interval_survival(l, a) {
                        survival.insert(HistoryKey::new(l, a), curve);
                        support.insert(HistoryKey::new(l, a));
                    }
                    if k < self.grid().horizon() {
                        if let Some(p) = self.covariate_transition(l, a) {
                            transitions.insert(HistoryKey::new(l, a), p);
                        }
                    }
                });
            });
        }
        ConditionalLaws::new(self.grid().clone(), nl, na, transitions, survival, support)
    }

    /// Exact `P(T^g > t)`.
    pub fn counterfactual_survival(&self, g: &TreatmentRegime, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Domain { value: t, lower: 0.0 });
        }
        let p = self.grid().interval_index(t)?;
        let mut l = Vec::with_capacity(p + 1);
        Ok(self.regime_tail(g, &mut l, vec![1.0; self.bins()], p, t))
    }

    pub fn counterfactual_survival_curve(&self, g: &TreatmentRegime, times: &[f64]) -> Result<Vec<f64>> {
        times.iter().map(|&t| self.counterfactual_survival(g, t)).collect()
    }

    /// Exact `P(T^g > t | L̄_k = l̄_k, Ā_{k-1} = ḡ_{k-1}(l̄_{k-1}), T > τ_k)`,
    /// or `None` when the conditioning event is null.
    pub fn counterfactual_conditional_survival(&self, g: &TreatmentRegime, covariates: &[Code], t: f64) -> Result<Option<f64>> {
        let k = covariates.len() - 1;
        if !(t > self.grid().tau(k)) {
            return Err(Error::Domain { value: t, lower: self.grid().tau(k) });
        }
        let a = g.apply(self.grid(), covariates)?;
        let prior = &a[..k];
        let tw = self.treatment_weight(&covariates[..k], prior);
        let weights = self.covariate_weights(covariates, prior);
        let h = self.at_risk_threshold(&covariates[..k], prior);
        let denominator: f64 = tw * weights.iter().enumerate().map(|(b, w)| w * self.bin_tail(b, h)).sum::<f64>();
        if !(denominator > 0.0) {
            return Ok(None);
        }
        let p = self.grid().interval_index(t)?;
        let mut l = covariates.to_vec();
        let numerator = tw * self.regime_tail(g, &mut l, weights, p, t);
        Ok(Some(numerator / denominator))
    }

    /// `Σ_b Σ_{l_{m..p}} W_b · P(bin b, T₀ > G^g_p(t))`, extending the path `l`
    /// (whose per-bin covariate weights are `w`) under `g`.
    fn regime_tail(&self, g: &TreatmentRegime, l: &mut Vec<Code>, w: Vec<f64>, p: usize, t: f64) -> f64 {
        let m = l.len();
        let a = g.apply(self.grid(), l).expect("path within horizon");
        if m == p + 1 {
            let (alpha, beta) = self.dgp.model().stage_affine(p, l, &a);
            let x = alpha + beta * t;
            return w.iter().enumerate().map(|(b, wb)| wb * self.bin_tail(b, x)).sum();
        }
        let mut total = 0.0;
        let mut probs = Vec::new();
        let mut per_bin = vec![vec![0.0; self.covariate_size() as usize]; self.bins()];
        for (b, row) in per_bin.iter_mut().enumerate() {
            if w[b] > 0.0 {
                self.dgp.covariate_probabilities(m, b, l, &a, &mut probs);
                row.copy_from_slice(&probs);
            }
        }
        for next in 0..self.covariate_size() {
            let child: Vec<f64> = (0..self.bins()).map(|b| w[b] * per_bin[b][next as usize]).collect();
            if child.iter().all(|&v| v == 0.0) {
                continue;
            }
            l.push(next);
            total += self.regime_tail(g, l, child, p, t);
            l.pop();
        }
        total
    }

    /// Exact `E[T^g]`.
    pub fn counterfactual_mean(&self, g: &TreatmentRegime) -> f64 {
        let mut l = Vec::with_capacity(self.grid().visits());
        self.regime_mean(g, &mut l, vec![1.0; self.bins()])
    }

    fn regime_mean(&self, g: &TreatmentRegime, l: &mut Vec<Code>, w: Vec<f64>) -> f64 {
        let m = l.len();
        let a = g.apply(self.grid(), l).expect("path within horizon");
        let mut probs = Vec::new();
        let mut total = 0.0;
        for next in 0..self.covariate_size() {
            let mut child = vec![0.0; self.bins()];
            for b in 0..self.bins() {
                if w[b] > 0.0 {
                    self.dgp.covariate_probabilities(m, b, l, &a, &mut probs);
                    child[b] = w[b] * probs[next as usize];
                }
            }
            if child.iter().all(|&v| v == 0.0) {
                continue;
            }
            l.push(next);
            let a_full = g.apply(self.grid(), l).expect("path within horizon");
            // event inside interval m: T₀ ∈ (G_m(τ_m), G_m(τ_{m+1})], T = (T₀ − α)/β
            let (alpha, beta) = self.dgp.model().stage_affine(m, l, &a_full);
            let lo_t = alpha + beta * self.grid().tau(m);
            let up = self.grid().upper(m);
            let hi_t = if up.is_finite() { alpha + beta * up } else { f64::INFINITY };
            let s = &self.dgp.config().baseline;
            for (b, &wb) in child.iter().enumerate() {
                if wb == 0.0 {
                    continue;
                }
                let lo = lo_t.max(self.edges[b]);
                let hi = hi_t.min(self.edges[b + 1]);
                if hi <= lo {
                    continue;
                }
                let mass = s.survival(lo) - s.survival(hi);
                total += wb * (s.partial_expectation(lo, hi) - alpha * mass) / beta;
            }
            if m < self.grid().horizon() {
                total += self.regime_mean(g, l, child);
            }
            l.pop();
        }
        total
    }

    /// Joint density of `(T, L̄, Ā)` at an observed trajectory.
    pub fn joint_density(&self, traj: &Trajectory) -> f64 {
        let p = traj.last_visit();
        let model = self.dgp.model();
        let (alpha, beta) = model.stage_affine(p, &traj.covariates, &traj.treatments);
        let t0 = alpha + beta * traj.event_time;
        let bin = self.dgp.bin_of(t0);
        let w = self.covariate_weights(&traj.covariates, &traj.treatments)[bin];
        beta * self.dgp.config().baseline.density(t0) * w * self.treatment_weight(&traj.covariates, &traj.treatments)
    }

    /// `Π_k P(A_k = a_k | l̄_k, ā_{k-1}, T > τ_k)` along a trajectory.
    pub fn treatment_factor(&self, traj: &Trajectory) -> f64 {
        self.treatment_weight(&traj.covariates, &traj.treatments)
    }

    /// Every positive-probability cell `(l̄_k, ā_k)` in lexicographic order
    /// of `(k, l̄_k, ā_k)`.
    pub fn positive_cells(&self) -> Vec<HistoryKey> {
        let mut cells = Vec::new();
        for k in 0..=self.grid().horizon() {
            for_each_sequence(self.covariate_size(), k + 1, |l| {
                for_each_sequence(self.treatment_size(), k + 1, |a| {
                    if self.at_risk(l, a) > 0.0 {
                        cells.push(HistoryKey::new(l, a));
                    }
                });
            });
        }
        cells
    }
}

impl JointLaw for EnumeratedWorld {
    fn grid(&self) -> &TimeGrid {
        self.dgp.grid()
    }

    fn covariate_size(&self) -> Code {
        self.dgp.config().covariate_levels
    }

    fn treatment_levels(&self) -> Code {
        self.dgp.config().treatment_levels
    }

    fn at_risk_probability(&self, covariates: &[Code], treatments: &[Code]) -> Result<f64> {
        Ok(self.at_risk(covariates, treatments))
    }
}

impl JointLaw for ConditionalLaws {
    fn grid(&self) -> &TimeGrid {
        ConditionalLaws::grid(self)
    }

    fn covariate_size(&self) -> Code {
        ConditionalLaws::covariate_size(self)
    }

    fn treatment_levels(&self) -> Code {
        ConditionalLaws::treatment_levels(self)
    }

    fn at_risk_probability(&self, _: &[Code], _: &[Code]) -> Result<f64> {
        Err(Error::UnsupportedLaw)
    }
}
