//! Observed-data conditional laws that G-computation consumes: covariate
//! transitions `P(L_m | l̄_{m-1}, ā_{m-1}, T > τ_m)` and interval survival
//! `P(T > t | l̄_k, ā_k, T > τ_k)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::history::{Code, Cohort};
use crate::survival::SurvivalCurve;

pub const LAWS_SCHEMA_VERSION: u32 = 1;

/// A history cell `(l̄, ā)`; both sequences have the same length.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HistoryKey {
    pub covariates: Vec<Code>,
    pub treatments: Vec<Code>,
}

impl HistoryKey {
    pub fn new(covariates: &[Code], treatments: &[Code]) -> Self {
        Self { covariates: covariates.to_vec(), treatments: treatments.to_vec() }
    }
}

impl std::fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "l̄={:?}, ā={:?}", self.covariates, self.treatments)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTerm {
    pub weight: f64,
    pub lo: f64,
    /// `None` stands for `+∞`.
    pub hi: Option<f64>,
}

/// `P(T > t | l̄_k, ā_k, T > τ_k)` for `t` in `(start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IntervalSurvival {
    /// Constant hazard; a zero rate (no observed events) is allowed.
    Exponential { start: f64, rate: f64 },
    /// Mixture over prognosis bins of a baseline curve evaluated on the affine
    /// scale `offset + slope·t`:
    /// `Σ w_b (S₀(clamp(offset + slope·t, lo_b, hi_b)) − S₀(hi_b)) / norm`.
    BinMixture {
        start: f64,
        end: Option<f64>,
        offset: f64,
        slope: f64,
        baseline: SurvivalCurve,
        terms: Vec<MixtureTerm>,
        norm: f64,
    },
}

impl IntervalSurvival {
    pub fn start(&self) -> f64 {
        match self {
            Self::Exponential { start, .. } | Self::BinMixture { start, .. } => *start,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.start() {
            return 1.0;
        }
        match self {
            Self::Exponential { start, rate } => {
                if *rate == 0.0 {
                    1.0
                } else {
                    (-rate * (t - start)).exp()
                }
            }
            Self::BinMixture { offset, slope, baseline, terms, norm, .. } => {
                let x = offset + slope * t;
                let mut total = 0.0;
                for term in terms {
                    let hi = term.hi.unwrap_or(f64::INFINITY);
                    total += term.weight * (baseline.survival(x.clamp(term.lo, hi)) - baseline.survival(hi));
                }
                (total / norm).clamp(0.0, 1.0)
            }
        }
    }

    /// Smallest `t` with `eval(t) ≤ u`, for `u ∈ (0, 1]`; `+∞` if never reached.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            Self::Exponential { start, rate } => {
                if *rate == 0.0 {
                    if u >= 1.0 {
                        *start
                    } else {
                        f64::INFINITY
                    }
                } else {
                    start - u.ln() / rate
                }
            }
            Self::BinMixture { start, end, .. } => {
                let mut lo = *start;
                let mut hi = match end {
                    Some(e) => *e,
                    None => start + 1.0,
                };
                let mut expansions = 0;
                while self.eval(hi) > u {
                    lo = hi;
                    hi = start + 2.0 * (hi - start);
                    expansions += 1;
                    if expansions > 200 {
                        return f64::INFINITY;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.eval(mid) > u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
        }
    }
}

/// The ingredients of the G-computation formula.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLaws {
    grid: TimeGrid,
    covariate_size: Code,
    treatment_levels: Code,
    transitions: BTreeMap<HistoryKey, Vec<f64>>,
    survival: BTreeMap<HistoryKey, IntervalSurvival>,
    support: BTreeSet<HistoryKey>,
}

impl ConditionalLaws {
    pub fn new(
        grid: TimeGrid,
        covariate_size: Code,
        treatment_levels: Code,
        transitions: BTreeMap<HistoryKey, Vec<f64>>,
        survival: BTreeMap<HistoryKey, IntervalSurvival>,
        support: BTreeSet<HistoryKey>,
    ) -> Result<Self> {
        for (key, probs) in &transitions {
            if probs.len() != covariate_size as usize {
                return Err(Error::InvalidConfig(format!("transition at {key} has {} entries", probs.len())));
            }
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidConfig(format!("transition at {key} is not a probability vector")));
            }
        }
        for key in survival.keys() {
            if key.covariates.is_empty() || key.covariates.len() != key.treatments.len() {
                return Err(Error::InvalidConfig(format!("malformed survival cell {key}")));
            }
        }
        Ok(Self { grid, covariate_size, treatment_levels, transitions, survival, support })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn covariate_size(&self) -> Code {
        self.covariate_size
    }

    pub fn treatment_levels(&self) -> Code {
        self.treatment_levels
    }

    /// `P(L_m = · | l̄_{m-1}, ā_{m-1}, T > τ_m)`, with `m = covariates.len()`.
    pub fn transition(&self, covariates: &[Code], treatments: &[Code]) -> Result<&[f64]> {
        self.transitions
            .get(&HistoryKey::new(covariates, treatments))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UndefinedCell(format!("no covariate transition at {}", HistoryKey::new(covariates, treatments))))
    }

    /// `P(T > · | l̄_k, ā_k, T > τ_k)`.
    pub fn interval(&self, covariates: &[Code], treatments: &[Code]) -> Result<&IntervalSurvival> {
        self.survival
            .get(&HistoryKey::new(covariates, treatments))
            .ok_or_else(|| Error::UndefinedCell(format!("no interval survival at {}", HistoryKey::new(covariates, treatments))))
    }

    pub fn in_support(&self, covariates: &[Code], treatments: &[Code]) -> bool {
        self.support.contains(&HistoryKey::new(covariates, treatments))
    }

    pub fn support(&self) -> &BTreeSet<HistoryKey> {
        &self.support
    }

    pub fn transitions(&self) -> &BTreeMap<HistoryKey, Vec<f64>> {
        &self.transitions
    }

    pub fn survival_cells(&self) -> &BTreeMap<HistoryKey, IntervalSurvival> {
        &self.survival
    }
}

#[derive(Serialize, Deserialize)]
struct LawsRepr {
    schema_version: u32,
    grid: TimeGrid,
    covariate_size: Code,
    treatment_levels: Code,
    covariate_transitions: Vec<TransitionRepr>,
    interval_survival: Vec<SurvivalRepr>,
    support: Vec<HistoryKey>,
}

#[derive(Serialize, Deserialize)]
struct TransitionRepr {
    covariates: Vec<Code>,
    treatments: Vec<Code>,
    probabilities: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SurvivalRepr {
    covariates: Vec<Code>,
    treatments: Vec<Code>,
    curve: IntervalSurvival,
}

impl Serialize for ConditionalLaws {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        LawsRepr {
            schema_version: LAWS_SCHEMA_VERSION,
            grid: self.grid.clone(),
            covariate_size: self.covariate_size,
            treatment_levels: self.treatment_levels,
            covariate_transitions: self
                .transitions
                .iter()
                .map(|(k, p)| TransitionRepr { covariates: k.covariates.clone(), treatments: k.treatments.clone(), probabilities: p.clone() })
                .collect(),
            interval_survival: self
                .survival
                .iter()
                .map(|(k, c)| SurvivalRepr { covariates: k.covariates.clone(), treatments: k.treatments.clone(), curve: c.clone() })
                .collect(),
            support: self.support.iter().cloned().collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ConditionalLaws {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let r = LawsRepr::deserialize(deserializer)?;
        if r.schema_version != LAWS_SCHEMA_VERSION {
            return Err(serde::de::Error::custom(format!("unsupported schema_version {}", r.schema_version)));
        }
        let transitions = r.covariate_transitions.into_iter().map(|t| (HistoryKey { covariates: t.covariates, treatments: t.treatments }, t.probabilities)).collect();
        let survival = r.interval_survival.into_iter().map(|s| (HistoryKey { covariates: s.covariates, treatments: s.treatments }, s.curve)).collect();
        Self::new(r.grid, r.covariate_size, r.treatment_levels, transitions, survival, r.support.into_iter().collect())
            .map_err(serde::de::Error::custom)
    }
}

/// Plug-in estimate: transition frequencies among subjects at risk, and one
/// exponential hazard (events over person-time) per cell and interval.
pub fn estimate_laws(cohort: &Cohort) -> Result<ConditionalLaws> {
    if cohort.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let grid = &cohort.grid;
    let size = cohort.alphabets.covariate_size();
    let mut counts: BTreeMap<HistoryKey, Vec<f64>> = BTreeMap::new();
    // (events, person-time)
    let mut exposure: BTreeMap<HistoryKey, (f64, f64)> = BTreeMap::new();
    for s in &cohort.subjects {
        let p = s.last_visit();
        for k in 0..=p {
            let prev = HistoryKey::new(&s.covariates[..k], &s.treatments[..k]);
            counts.entry(prev).or_insert_with(|| vec![0.0; size as usize])[s.covariates[k] as usize] += 1.0;
            let cell = HistoryKey::new(&s.covariates[..=k], &s.treatments[..=k]);
            let up = grid.upper(k);
            let entry = exposure.entry(cell).or_insert((0.0, 0.0));
            entry.1 += s.event_time.min(up) - grid.tau(k);
            if k == p {
                entry.0 += 1.0;
            }
        }
    }
    let transitions = counts
        .into_iter()
        .map(|(key, c)| {
            let total: f64 = c.iter().sum();
            (key, c.into_iter().map(|x| x / total).collect())
        })
        .collect();
    let support = exposure.keys().cloned().collect();
    let survival = exposure
        .into_iter()
        .map(|(key, (events, time))| {
            let k = key.covariates.len() - 1;
            let rate = if time > 0.0 { events / time } else { 0.0 };
            (key, IntervalSurvival::Exponential { start: grid.tau(k), rate })
        })
        .collect();
    ConditionalLaws::new(grid.clone(), size, cohort.alphabets.treatment_levels, transitions, survival, support)
}
