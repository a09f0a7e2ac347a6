use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Integer code of a covariate or treatment value. Treatment code 0 means "no treatment".
pub type Code = u32;

/// Finite alphabets shared by every visit.
///
/// A covariate vector with several components is stored as one mixed-radix code
/// (first component most significant); `covariate_levels` holds the radices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabets {
    pub covariate_levels: Vec<Code>,
    pub treatment_levels: Code,
}

impl Alphabets {
    pub fn new(covariate_levels: Vec<Code>, treatment_levels: Code) -> Result<Self> {
        if covariate_levels.is_empty() || covariate_levels.iter().any(|&r| r == 0) {
            return Err(Error::InvalidConfig("covariate alphabets must be non-empty".into()));
        }
        if treatment_levels == 0 {
            return Err(Error::InvalidConfig("treatment alphabet must contain code 0".into()));
        }
        Ok(Self { covariate_levels, treatment_levels })
    }

    pub fn simple(covariate_levels: Code, treatment_levels: Code) -> Self {
        Self { covariate_levels: vec![covariate_levels], treatment_levels }
    }

    /// Number of distinct covariate codes.
    pub fn covariate_size(&self) -> Code {
        self.covariate_levels.iter().product()
    }

    pub fn encode(&self, components: &[Code]) -> Result<Code> {
        if components.len() != self.covariate_levels.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} covariate components, got {}",
                self.covariate_levels.len(),
                components.len()
            )));
        }
        let mut code = 0;
        for (&v, &radix) in components.iter().zip(&self.covariate_levels) {
            if v >= radix {
                return Err(Error::InvalidConfig(format!("covariate value {v} outside 0..{radix}")));
            }
            code = code * radix + v;
        }
        Ok(code)
    }

    pub fn decode(&self, mut code: Code) -> Vec<Code> {
        let mut out = vec![0; self.covariate_levels.len()];
        for (slot, &radix) in out.iter_mut().zip(&self.covariate_levels).rev() {
            *slot = code % radix;
            code /= radix;
        }
        out
    }
}

/// One subject's record `(L̄, Ā, T)`.
///
/// `covariates[k]` and `treatments[k]` exist exactly for the visits `k` with
/// `τ_k < T`, i.e. `k = 0..=p(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub covariates: Vec<Code>,
    pub treatments: Vec<Code>,
    pub event_time: f64,
}

impl Trajectory {
    pub fn new(grid: &TimeGrid, covariates: Vec<Code>, treatments: Vec<Code>, event_time: f64) -> Result<Self> {
        let p = grid.interval_index(event_time)?;
        if covariates.len() != p + 1 || treatments.len() != p + 1 {
            return Err(Error::InvalidConfig(format!(
                "event time {event_time} needs histories for visits 0..={p}, got {} covariates and {} treatments",
                covariates.len(),
                treatments.len()
            )));
        }
        Ok(Self { covariates, treatments, event_time })
    }

    /// `p(T)`, the last visit before the event.
    pub fn last_visit(&self) -> usize {
        self.covariates.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub grid: TimeGrid,
    pub alphabets: Alphabets,
    pub subjects: Vec<Trajectory>,
}

impl Cohort {
    pub fn new(grid: TimeGrid, alphabets: Alphabets, subjects: Vec<Trajectory>) -> Result<Self> {
        let cov = alphabets.covariate_size();
        for (i, s) in subjects.iter().enumerate() {
            let p = grid.interval_index(s.event_time)?;
            if s.covariates.len() != p + 1 || s.treatments.len() != p + 1 {
                return Err(Error::InvalidConfig(format!("subject {i}: history length does not match event time")));
            }
            if s.covariates.iter().any(|&l| l >= cov) || s.treatments.iter().any(|&a| a >= alphabets.treatment_levels) {
                return Err(Error::InvalidConfig(format!("subject {i}: code outside the declared alphabets")));
            }
        }
        Ok(Self { grid, alphabets, subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

/// Calls `f` with every sequence of `len` codes drawn from `0..levels`, in
/// lexicographic order.
pub fn for_each_sequence(levels: Code, len: usize, mut f: impl FnMut(&[Code])) {
    let mut seq = vec![0; len];
    loop {
        f(&seq);
        let mut i = len;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            seq[i] += 1;
            if seq[i] < levels {
                break;
            }
            seq[i] = 0;
        }
    }
}
