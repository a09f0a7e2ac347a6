use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::TimeGrid;
use crate::history::{for_each_sequence, Code};

/// A deterministic rule `g_k(l̄_k)` assigning a dose at every visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreatmentRegime {
    /// History-free doses; visits past the end of `treatments` get 0.
    Static { treatments: Vec<Code> },
    /// Dose `dose` whenever the current covariate is at least `at_least`, else 0.
    Threshold { at_least: Code, dose: Code },
    /// `treatments[m]` while the covariate history agrees with the start of
    /// `covariates`, 0 once it departs or runs past the end.
    Path { covariates: Vec<Code>, treatments: Vec<Code> },
    /// Explicit lookup per visit; histories absent from the table get `default`.
    Table {
        #[serde(default)]
        default: Code,
        rules: Vec<TableRule>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRule {
    pub covariates: Vec<Code>,
    pub dose: Code,
}

impl TreatmentRegime {
    /// The baseline regime `0̄`.
    pub fn baseline() -> Self {
        Self::Static { treatments: Vec::new() }
    }

    /// `(ā_k, 0̄)`: follow `prefix`, then never treat.
    pub fn prefix_then_zero(prefix: &[Code]) -> Self {
        Self::Static { treatments: prefix.to_vec() }
    }

    pub fn from_table(default: Code, table: BTreeMap<Vec<Code>, Code>) -> Self {
        Self::Table {
            default,
            rules: table.into_iter().map(|(covariates, dose)| TableRule { covariates, dose }).collect(),
        }
    }

    /// `g_k(l̄_k)` where `k = history.len() - 1`.
    pub fn dose(&self, history: &[Code]) -> Code {
        let k = history.len() - 1;
        match self {
            Self::Static { treatments } => treatments.get(k).copied().unwrap_or(0),
            Self::Threshold { at_least, dose } => {
                if history[k] >= *at_least {
                    *dose
                } else {
                    0
                }
            }
            Self::Path { covariates, treatments } => {
                if k < covariates.len() && k < treatments.len() && history == &covariates[..=k] {
                    treatments[k]
                } else {
                    0
                }
            }
            Self::Table { default, rules } => {
                rules.iter().find(|r| r.covariates == history).map_or(*default, |r| r.dose)
            }
        }
    }

    /// `ḡ_k(l̄_k) = (g_0(l_0), …, g_k(l̄_k))`.
    pub fn apply(&self, grid: &TimeGrid, history: &[Code]) -> Result<Vec<Code>> {
        if history.is_empty() {
            return Ok(Vec::new());
        }
        grid.check_index(history.len() - 1)?;
        Ok((1..=history.len()).map(|m| self.dose(&history[..m])).collect())
    }

    pub fn max_dose(&self) -> Code {
        match self {
            Self::Static { treatments } => treatments.iter().copied().max().unwrap_or(0),
            Self::Threshold { dose, .. } => *dose,
            Self::Path { treatments, .. } => treatments.iter().copied().max().unwrap_or(0),
            Self::Table { default, rules } => rules.iter().map(|r| r.dose).max().unwrap_or(0).max(*default),
        }
    }
}

/// A law that can report exact probabilities `P(L̄_k = l̄_k, Ā_k = ā_k, T > τ_k)`.
pub trait JointLaw {
    fn grid(&self) -> &TimeGrid;
    fn covariate_size(&self) -> Code;
    fn treatment_levels(&self) -> Code;
    fn at_risk_probability(&self, covariates: &[Code], treatments: &[Code]) -> Result<f64>;
}

/// Evaluability: whenever `(l̄_k, ḡ_{k-1}(l̄_{k-1}))` is reached with positive
/// probability, continuing with `g_k(l̄_k)` has positive probability too.
pub fn is_evaluable(g: &TreatmentRegime, law: &dyn JointLaw) -> Result<bool> {
    Ok(evaluability_violation(g, law)?.is_none())
}

/// The first covariate history at which `g` stops being evaluable, if any.
pub fn evaluability_violation(g: &TreatmentRegime, law: &dyn JointLaw) -> Result<Option<Vec<Code>>> {
    let grid = law.grid().clone();
    let mut violation = None;
    let mut failure = None;
    for k in 0..=grid.horizon() {
        for_each_sequence(law.covariate_size(), k + 1, |l| {
            if violation.is_some() || failure.is_some() {
                return;
            }
            let result = (|| -> Result<bool> {
                let mut a = g.apply(&grid, l)?;
                let prescribed = a[k];
                if prescribed >= law.treatment_levels() {
                    return Ok(true);
                }
                let mut reached = 0.0;
                for dose in 0..law.treatment_levels() {
                    a[k] = dose;
                    reached += law.at_risk_probability(l, &a)?;
                }
                a[k] = prescribed;
                Ok(reached > 0.0 && law.at_risk_probability(l, &a)? <= 0.0)
            })();
            match result {
                Ok(true) => violation = Some(l.to_vec()),
                Ok(false) => {}
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if violation.is_some() {
            break;
        }
    }
    Ok(violation)
}

/// Every deterministic regime over the finite covariate space, as lookup tables.
///
/// Returns `None` when there are more than `cap` of them.
pub fn enumerate_regimes(grid: &TimeGrid, covariate_size: Code, treatment_levels: Code, cap: u128) -> Option<Vec<TreatmentRegime>> {
    let histories = all_histories(grid, covariate_size);
    let count = (treatment_levels as u128).checked_pow(histories.len() as u32)?;
    if count > cap {
        return None;
    }
    let mut regimes = Vec::with_capacity(count as usize);
    for_each_sequence(treatment_levels, histories.len(), |doses| {
        regimes.push(table_regime(&histories, doses));
    });
    Some(regimes)
}

/// `count` regimes drawn uniformly from the full deterministic regime space.
pub fn sample_regimes(grid: &TimeGrid, covariate_size: Code, treatment_levels: Code, count: usize, seed: u64) -> Vec<TreatmentRegime> {
    use rand::Rng;
    let histories = all_histories(grid, covariate_size);
    (0..count)
        .map(|i| {
            let mut rng = crate::streams::stream(seed, "oracle.regimes", i as u64);
            let doses: Vec<Code> = histories.iter().map(|_| rng.random_range(0..treatment_levels)).collect();
            table_regime(&histories, &doses)
        })
        .collect()
}

fn all_histories(grid: &TimeGrid, covariate_size: Code) -> Vec<Vec<Code>> {
    let mut histories = Vec::new();
    for k in 0..=grid.horizon() {
        for_each_sequence(covariate_size, k + 1, |l| histories.push(l.to_vec()));
    }
    histories
}

fn table_regime(histories: &[Vec<Code>], doses: &[Code]) -> TreatmentRegime {
    TreatmentRegime::Table {
        default: 0,
        rules: histories
            .iter()
            .zip(doses)
            .filter(|(_, &d)| d != 0)
            .map(|(h, &d)| TableRule { covariates: h.clone(), dose: d })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn grid2() -> TimeGrid {
        TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn static_zero_regime() {
        let g = TreatmentRegime::baseline();
        assert_eq!(g.apply(&grid2(), &[1, 0, 1]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn threshold_regime() {
        let g = TreatmentRegime::Threshold { at_least: 1, dose: 1 };
        assert_eq!(g.apply(&grid2(), &[0, 1]).unwrap(), vec![0, 1]);
    }

    #[test]
    fn prefix_then_zero_regime() {
        let g = TreatmentRegime::prefix_then_zero(&[1, 1]);
        assert_eq!(g.apply(&grid2(), &[0, 1, 1]).unwrap(), vec![1, 1, 0]);
    }

    #[test]
    fn history_past_horizon_is_rejected() {
        let g = TreatmentRegime::baseline();
        assert!(matches!(g.apply(&grid2(), &[0, 0, 0, 0]), Err(Error::GridBounds { .. })));
    }

    #[test]
    fn path_regime_departs_to_zero() {
        let g = TreatmentRegime::Path { covariates: vec![1, 0], treatments: vec![1, 1] };
        assert_eq!(g.apply(&grid2(), &[1, 0, 1]).unwrap(), vec![1, 1, 0]);
        assert_eq!(g.apply(&grid2(), &[1, 1, 1]).unwrap(), vec![1, 0, 0]);
        assert_eq!(g.apply(&grid2(), &[0, 0]).unwrap(), vec![0, 0]);
    }

    #[test]
    fn enumeration_counts() {
        let g = TimeGrid::new(vec![0.0, 1.0]).unwrap();
        let all = enumerate_regimes(&g, 2, 2, 10_000).unwrap();
        assert_eq!(all.len(), 64);
        assert!(enumerate_regimes(&g, 2, 2, 10).is_none());
        let json = serde_json::to_string(&all[37]).unwrap();
        let back: TreatmentRegime = serde_json::from_str(&json).unwrap();
        assert_eq!(back, all[37]);
    }
}
