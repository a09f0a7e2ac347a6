//! Counterfactual-first synthetic worlds with a known shift parameter.
//!
//! A subject's baseline time `T₀` is drawn first; covariates depend on it only
//! through a prognosis bin, treatments only on the observed past, and the
//! observed event time comes from inverting the shift functions step by step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::history::{Alphabets, Code, Cohort, Trajectory};
use crate::laws::ConditionalLaws;
use crate::snftm::{BlipStep, FeatureMap, ShiftFeatures, ShiftModel};
use crate::streams::{categorical, open01, stream, StreamRng, DEFAULT_SEED};
use crate::survival::SurvivalCurve;

/// Largest number of cells `true_conditional_laws` will enumerate.
pub const DGP_CELL_GUARD: u128 = 10_000_000;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_features() -> ShiftFeatures {
    ShiftFeatures::Standard
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub grid: TimeGrid,
    pub covariate_levels: Code,
    pub treatment_levels: Code,
    /// Law of the baseline time `T^0̄`.
    pub baseline: SurvivalCurve,
    /// Cut points `c_1 < … < c_{B-1}`; bin `b` is `(c_b, c_{b+1}]`.
    #[serde(default)]
    pub prognosis_thresholds: Vec<f64>,
    /// `P(L_k | k, bin(T₀), l̄_{k-1}, ā_{k-1})`.
    pub covariate_law: CategoricalLaw,
    /// `P(A_k | k, l̄_k, ā_{k-1})`.
    pub treatment_law: CategoricalLaw,
    #[serde(default = "default_features")]
    pub shift_features: ShiftFeatures,
    pub psi0: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// A finite-outcome conditional law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CategoricalLaw {
    /// Multinomial logit with level 0 as reference; one coefficient row per
    /// non-reference level. Covariate features are
    /// `[1, 1{bin = 1}, …, 1{bin = B-1}, l_{k-1}, a_{k-1}]`; treatment features
    /// are `[1, l_k, a_{k-1}]` (missing predecessors count as 0).
    Logit { coefficients: Vec<Vec<f64>> },
    /// First matching entry wins; unmatched contexts use `default`.
    Table {
        default: Vec<f64>,
        #[serde(default)]
        entries: Vec<LawEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawEntry {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub bin: Option<usize>,
    /// Full covariate history the entry applies to (`l̄_{k-1}` for covariate
    /// laws, `l̄_k` for treatment laws).
    #[serde(default)]
    pub covariates: Option<Vec<Code>>,
    /// Full treatment history `ā_{k-1}`.
    #[serde(default)]
    pub treatments: Option<Vec<Code>>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawRole {
    Covariate { bins: usize },
    Treatment,
}

impl LawRole {
    pub fn feature_dim(self) -> usize {
        match self {
            Self::Covariate { bins } => bins + 2,
            Self::Treatment => 3,
        }
    }
}

/// `[1, bin indicators, l_{k-1}, a_{k-1}]` for the covariate drawn at visit
/// `k = covariates.len()`.
pub fn covariate_features(bins: usize, bin: usize, covariates: &[Code], treatments: &[Code], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for b in 1..bins {
        out.push(if bin == b { 1.0 } else { 0.0 });
    }
    out.push(covariates.last().map_or(0.0, |&l| l as f64));
    out.push(treatments.last().map_or(0.0, |&a| a as f64));
}

/// `[1, l_k, a_{k-1}]` for the treatment at visit `k = covariates.len() - 1`.
pub fn treatment_features(covariates: &[Code], treatments_before: &[Code], out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    out.push(*covariates.last().expect("covariate history includes l_k") as f64);
    out.push(treatments_before.last().map_or(0.0, |&a| a as f64));
}

/// Softmax with level 0 as reference.
pub fn logit_probabilities(coefficients: &[Vec<f64>], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(0.0);
    for row in coefficients {
        out.push(row.iter().zip(x).map(|(b, v)| b * v).sum());
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

impl CategoricalLaw {
    /// Probability vector for the context `(k, bin, l̄, ā)`; for covariate laws
    /// `covariates` is `l̄_{k-1}`, for treatment laws it is `l̄_k`.
    pub fn probabilities(&self, role: LawRole, k: usize, bin: usize, covariates: &[Code], treatments: &[Code], out: &mut Vec<f64>) {
        match self {
            Self::Logit { coefficients } => {
                let mut x = Vec::with_capacity(role.feature_dim());
                match role {
                    LawRole::Covariate { bins } => covariate_features(bins, bin, covariates, treatments, &mut x),
                    LawRole::Treatment => treatment_features(covariates, treatments, &mut x),
                }
                logit_probabilities(coefficients, &x, out);
            }
            Self::Table { default, entries } => {
                let hit = entries.iter().find(|e| {
                    e.k.is_none_or(|ek| ek == k)
                        && (matches!(role, LawRole::Treatment) || e.bin.is_none_or(|eb| eb == bin))
                        && e.covariates.as_deref().is_none_or(|c| c == covariates)
                        && e.treatments.as_deref().is_none_or(|t| t == treatments)
                });
                out.clear();
                out.extend_from_slice(hit.map_or(default, |e| &e.probabilities));
            }
        }
    }

    pub(crate) fn validate(&self, name: &str, role: LawRole, levels: Code) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(format!("{name}: {msg}")));
        match self {
            Self::Logit { coefficients } => {
                if coefficients.len() != levels as usize - 1 {
                    return bad(format!("expected {} coefficient rows, got {}", levels - 1, coefficients.len()));
                }
                for row in coefficients {
                    if row.len() != role.feature_dim() {
                        return bad(format!("coefficient rows need {} entries, got {}", role.feature_dim(), row.len()));
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return bad("coefficients must be finite".into());
                    }
                }
            }
            Self::Table { default, entries } => {
                for probs in std::iter::once(default).chain(entries.iter().map(|e| &e.probabilities)) {
                    if probs.len() != levels as usize {
                        return bad(format!("probability vectors need {levels} entries"));
                    }
                    let total: f64 = probs.iter().sum();
                    if (total - 1.0).abs() > 1e-12 || probs.iter().any(|&p| !(p >= 0.0)) {
                        return bad(format!("{probs:?} is not a probability vector"));
                    }
                    if role == LawRole::Treatment && probs[0] <= 0.0 {
                        return bad("every treatment law must leave P(A = 0) > 0".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// A validated structural world ready for sampling.
#[derive(Debug, Clone)]
pub struct Dgp {
    config: DgpConfig,
    model: ShiftModel,
}

impl Dgp {
    pub fn new(config: DgpConfig) -> Result<Self> {
        if config.covariate_levels == 0 || config.treatment_levels == 0 {
            return Err(Error::InvalidConfig("alphabets must be non-empty".into()));
        }
        if config.baseline.start() != 0.0 {
            return Err(Error::InvalidConfig("baseline survival must start at 0".into()));
        }
        let th = &config.prognosis_thresholds;
        if th.iter().any(|&c| !(c > 0.0) || !c.is_finite()) || th.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("prognosis thresholds must be positive and increasing".into()));
        }
        let bins = th.len() + 1;
        config.covariate_law.validate("covariate_law", LawRole::Covariate { bins }, config.covariate_levels)?;
        config.treatment_law.validate("treatment_law", LawRole::Treatment, config.treatment_levels)?;
        let model = ShiftModel::new(config.grid.clone(), config.psi0.clone(), config.shift_features)?;
        Ok(Self { config, model })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.config.grid
    }

    pub fn model(&self) -> &ShiftModel {
        &self.model
    }

    pub fn alphabets(&self) -> Alphabets {
        Alphabets::simple(self.config.covariate_levels, self.config.treatment_levels)
    }

    pub fn bins(&self) -> usize {
        self.config.prognosis_thresholds.len() + 1
    }

    /// Bin `b` with `c_b < t0 ≤ c_{b+1}`.
    pub fn bin_of(&self, t0: f64) -> usize {
        self.config.prognosis_thresholds.partition_point(|&c| c < t0)
    }

    /// Bin edges `c_0 = 0, …, c_B = ∞`.
    pub fn bin_edges(&self) -> Vec<f64> {
        let mut edges = vec![0.0];
        edges.extend_from_slice(&self.config.prognosis_thresholds);
        edges.push(f64::INFINITY);
        edges
    }

    /// A copy with another master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.config.seed = seed;
        out
    }

    /// A copy with another shift parameter.
    pub fn with_psi(&self, psi: Vec<f64>) -> Result<Self> {
        let mut config = self.config.clone();
        config.psi0 = psi;
        Self::new(config)
    }

    pub fn covariate_probabilities(&self, k: usize, bin: usize, covariates: &[Code], treatments: &[Code], out: &mut Vec<f64>) {
        self.config.covariate_law.probabilities(LawRole::Covariate { bins: self.bins() }, k, bin, covariates, treatments, out);
    }

    pub fn treatment_probabilities(&self, covariates: &[Code], treatments: &[Code], out: &mut Vec<f64>) {
        let k = covariates.len() - 1;
        self.config.treatment_law.probabilities(LawRole::Treatment, k, 0, covariates, treatments, out);
    }

    /// One subject: draws `T₀`, then covariates and treatments visit by visit
    /// until the inverted shift lands inside the current interval.
    pub fn sample_trajectory(&self, rng: &mut StreamRng) -> (Trajectory, f64) {
        let t0 = self
            .config
            .baseline
            .quantile(open01(rng))
            .expect("open uniform lies in (0, 1)");
        (self.trajectory_from_t0(t0, rng), t0)
    }

    fn trajectory_from_t0(&self, t0: f64, rng: &mut StreamRng) -> Trajectory {
        let bin = self.bin_of(t0);
        let mut l = Vec::with_capacity(self.grid().visits());
        let mut a = Vec::with_capacity(self.grid().visits());
        let mut probs = Vec::new();
        let mut v = t0;
        for k in 0..=self.grid().horizon() {
            self.covariate_probabilities(k, bin, &l, &a, &mut probs);
            l.push(categorical(&probs, open01(rng)) as Code);
            self.treatment_probabilities(&l, &a, &mut probs);
            a.push(categorical(&probs, open01(rng)) as Code);
            match self.model.blip_up_step(k, &l, &a, v).expect("candidate stays above τ_k") {
                BlipStep::Settled(t) => return Trajectory { covariates: l, treatments: a, event_time: t },
                BlipStep::Continue(next) => v = next,
            }
        }
        unreachable!("the last interval is unbounded")
    }

    /// Subject `index` of the cohort seeded by `seed`, with its drawn `T₀`.
    pub fn sample_subject(&self, seed: u64, index: u64) -> (Trajectory, f64) {
        let mut rng = stream(seed, "dgp.subject", index);
        self.sample_trajectory(&mut rng)
    }

    pub fn sample_cohort(&self, n: usize) -> Result<Cohort> {
        Ok(self.sample_cohort_with_t0(n)?.0)
    }

    /// The cohort together with each subject's drawn baseline time.
    pub fn sample_cohort_with_t0(&self, n: usize) -> Result<(Cohort, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidConfig("cohort size must be at least 1".into()));
        }
        let seed = self.config.seed;
        let (subjects, t0): (Vec<_>, Vec<_>) = (0..n as u64).into_par_iter().map(|i| self.sample_subject(seed, i)).unzip();
        Ok((Cohort { grid: self.grid().clone(), alphabets: self.alphabets(), subjects }, t0))
    }

    /// Exact observed-data conditional laws implied by the structural world.
    pub fn true_conditional_laws(&self) -> Result<ConditionalLaws> {
        crate::oracle::EnumeratedWorld::with_guard(self.clone(), DGP_CELL_GUARD)?.conditional_laws()
    }
}

impl<F: FeatureMap> ShiftModel<F> {
    /// `T₀^γ` for every subject of a cohort.
    pub fn blip_cohort(&self, cohort: &Cohort) -> Vec<f64> {
        cohort.subjects.iter().map(|s| self.blip_down(s, 0)).collect()
    }
}
