//! Counterfactual simulation from a fitted world: draw `T'₀` from the baseline
//! law, draw covariates given the prognosis bin of `T'₀` and the history, set
//! treatment by the regime, and undo the shift visit by visit.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{CategoricalLaw, Dgp, LawRole};
use crate::error::{Error, Result};
use crate::gcomp::EstimatedCurve;
use crate::grid::TimeGrid;
use crate::history::{Code, Cohort, Trajectory};
use crate::regime::TreatmentRegime;
use crate::snftm::{BlipStep, ShiftFeatures, ShiftModel};
use crate::streams::{categorical, open01, stream};
use crate::survival::SurvivalCurve;

pub const WORLD_SCHEMA_VERSION: u32 = 1;
pub const CFSIM_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaselineDist {
    /// Resampling from blipped-down times.
    Empirical { times: Vec<f64> },
    Parametric { curve: SurvivalCurve },
}

/// Covariate law given `(k, bin(T₀), l̄_{k-1}, ā_{k-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariateModel {
    Exact { law: CategoricalLaw },
    /// Observed frequencies per cell; cells never seen are absent.
    Estimated { cells: Vec<CovariateCell> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateCell {
    pub k: usize,
    pub bin: usize,
    pub covariates: Vec<Code>,
    pub treatments: Vec<Code>,
    pub count: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedWorld {
    pub schema_version: u32,
    pub grid: TimeGrid,
    pub covariate_levels: Code,
    pub treatment_levels: Code,
    pub shift_features: ShiftFeatures,
    pub psi_hat: Vec<f64>,
    #[serde(default)]
    pub prognosis_thresholds: Vec<f64>,
    pub baseline: BaselineDist,
    pub covariate_model: CovariateModel,
}

/// How `estimate` represents the law of `T^0̄`.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineChoice {
    Empirical,
    /// Piecewise-exponential fit with the given breakpoints (first must be 0).
    PiecewiseExponential { breaks: Vec<f64> },
}

type CellKey = (usize, usize, Vec<Code>, Vec<Code>);

impl FittedWorld {
    /// The generating world itself with `ψ̂ = ψ₀`.
    pub fn from_dgp(dgp: &Dgp) -> Self {
        let c = dgp.config();
        Self {
            schema_version: WORLD_SCHEMA_VERSION,
            grid: c.grid.clone(),
            covariate_levels: c.covariate_levels,
            treatment_levels: c.treatment_levels,
            shift_features: c.shift_features,
            psi_hat: c.psi0.clone(),
            prognosis_thresholds: c.prognosis_thresholds.clone(),
            baseline: BaselineDist::Parametric { curve: c.baseline.clone() },
            covariate_model: CovariateModel::Exact { law: c.covariate_law.clone() },
        }
    }

    /// Plug-in world from a cohort: blip every subject down with `ψ̂`, fit the
    /// baseline law to those times, tabulate covariate frequencies per cell.
    pub fn estimate(
        cohort: &Cohort,
        psi_hat: Vec<f64>,
        features: ShiftFeatures,
        thresholds: Vec<f64>,
        baseline: BaselineChoice,
    ) -> Result<Self> {
        if cohort.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let model = ShiftModel::new(cohort.grid.clone(), psi_hat.clone(), features)?;
        let t0 = model.blip_cohort(cohort);
        let levels = cohort.alphabets.covariate_size();
        let bin_of = |t: f64| thresholds.partition_point(|&c| c < t);

        let mut counts: HashMap<CellKey, Vec<usize>> = HashMap::new();
        for (s, &t) in cohort.subjects.iter().zip(&t0) {
            let bin = bin_of(t);
            for k in 0..s.covariates.len() {
                let key = (k, bin, s.covariates[..k].to_vec(), s.treatments[..k].to_vec());
                counts.entry(key).or_insert_with(|| vec![0; levels as usize])[s.covariates[k] as usize] += 1;
            }
        }
        let mut cells: Vec<CovariateCell> = counts
            .into_iter()
            .map(|((k, bin, covariates, treatments), c)| {
                let count: usize = c.iter().sum();
                CovariateCell {
                    k,
                    bin,
                    covariates,
                    treatments,
                    count,
                    probabilities: c.iter().map(|&v| v as f64 / count as f64).collect(),
                }
            })
            .collect();
        cells.sort_by(|a, b| (a.k, a.bin, &a.covariates, &a.treatments).cmp(&(b.k, b.bin, &b.covariates, &b.treatments)));

        let baseline = match baseline {
            BaselineChoice::Empirical => {
                let mut times = t0;
                times.sort_by(f64::total_cmp);
                BaselineDist::Empirical { times }
            }
            BaselineChoice::PiecewiseExponential { breaks } => BaselineDist::Parametric { curve: fit_piecewise(&t0, breaks)? },
        };
        let world = Self {
            schema_version: WORLD_SCHEMA_VERSION,
            grid: cohort.grid.clone(),
            covariate_levels: levels,
            treatment_levels: cohort.alphabets.treatment_levels,
            shift_features: features,
            psi_hat,
            prognosis_thresholds: thresholds,
            baseline,
            covariate_model: CovariateModel::Estimated { cells },
        };
        world.validate()?;
        Ok(world)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: Self = serde_json::from_str(text)?;
        if world.schema_version != WORLD_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported world schema version {}", world.schema_version)));
        }
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        let th = &self.prognosis_thresholds;
        if th.iter().any(|&c| !(c > 0.0) || !c.is_finite()) || th.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("prognosis thresholds must be positive and increasing".into()));
        }
        if self.covariate_levels == 0 || self.treatment_levels == 0 {
            return Err(Error::InvalidConfig("alphabets must be non-empty".into()));
        }
        match &self.baseline {
            BaselineDist::Empirical { times } => {
                if times.is_empty() || times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
                    return Err(Error::InvalidConfig("empirical baseline needs positive finite times".into()));
                }
            }
            BaselineDist::Parametric { curve } => {
                if curve.start() != 0.0 {
                    return Err(Error::InvalidConfig("baseline survival must start at 0".into()));
                }
            }
        }
        let bins = th.len() + 1;
        match &self.covariate_model {
            CovariateModel::Exact { law } => law.validate("covariate_law", LawRole::Covariate { bins }, self.covariate_levels)?,
            CovariateModel::Estimated { cells } => {
                for c in cells {
                    let total: f64 = c.probabilities.iter().sum();
                    if c.probabilities.len() != self.covariate_levels as usize
                        || (total - 1.0).abs() > 1e-9
                        || c.probabilities.iter().any(|&p| !(p >= 0.0))
                    {
                        return Err(Error::InvalidConfig(format!("cell {} is not a probability vector", cell_name(c.k, c.bin, &c.covariates, &c.treatments))));
                    }
                    if c.bin >= bins || c.covariates.len() != c.k || c.treatments.len() != c.k || c.k > self.grid.horizon() {
                        return Err(Error::InvalidConfig(format!("cell {} does not fit the grid and bins", cell_name(c.k, c.bin, &c.covariates, &c.treatments))));
                    }
                }
            }
        }
        ShiftModel::new(self.grid.clone(), self.psi_hat.clone(), self.shift_features)?;
        Ok(())
    }

    pub fn bin_of(&self, t0: f64) -> usize {
        self.prognosis_thresholds.partition_point(|&c| c < t0)
    }
}

fn cell_name(k: usize, bin: usize, l: &[Code], a: &[Code]) -> String {
    format!("(k={k}, bin={bin}, covariates={l:?}, treatments={a:?})")
}

/// Events over exposure per piece.
fn fit_piecewise(times: &[f64], breaks: Vec<f64>) -> Result<SurvivalCurve> {
    if breaks.first() != Some(&0.0) {
        return Err(Error::InvalidConfig("baseline breaks must start at 0".into()));
    }
    let m = breaks.len();
    let mut events = vec![0.0; m];
    let mut exposure = vec![0.0; m];
    for &t in times {
        for j in 0..m {
            let hi = breaks.get(j + 1).copied().unwrap_or(f64::INFINITY);
            if t <= breaks[j] {
                break;
            }
            exposure[j] += t.min(hi) - breaks[j];
            if t <= hi {
                events[j] += 1.0;
            }
        }
    }
    let mut rates = Vec::with_capacity(m);
    for j in 0..m {
        if events[j] == 0.0 {
            return Err(Error::NonIdentifiable(format!("no blipped time falls in baseline piece {j}")));
        }
        rates.push(events[j] / exposure[j]);
    }
    SurvivalCurve::new(breaks, rates)
}

/// One simulated record and the baseline time it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    pub trajectory: Trajectory,
    pub t0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSummary {
    pub schema_version: u32,
    pub regime: TreatmentRegime,
    pub seed: u64,
    pub draws: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub curve: EstimatedCurve,
}

struct Sampler<'a> {
    world: &'a FittedWorld,
    model: ShiftModel,
    table: Option<HashMap<CellKey, &'a [f64]>>,
}

impl<'a> Sampler<'a> {
    fn new(world: &'a FittedWorld) -> Result<Self> {
        world.validate()?;
        let model = ShiftModel::new(world.grid.clone(), world.psi_hat.clone(), world.shift_features)?;
        let table = match &world.covariate_model {
            CovariateModel::Exact { .. } => None,
            CovariateModel::Estimated { cells } => Some(
                cells
                    .iter()
                    .map(|c| ((c.k, c.bin, c.covariates.clone(), c.treatments.clone()), c.probabilities.as_slice()))
                    .collect(),
            ),
        };
        Ok(Self { world, model, table })
    }

    fn draw_t0(&self, rng: &mut impl Rng) -> f64 {
        match &self.world.baseline {
            BaselineDist::Empirical { times } => times[rng.random_range(0..times.len())],
            BaselineDist::Parametric { curve } => curve.quantile(open01(rng)).expect("open uniform lies in (0, 1)"),
        }
    }

    fn covariate_probs(&self, k: usize, bin: usize, l: &[Code], a: &[Code], out: &mut Vec<f64>) -> Result<()> {
        match (&self.world.covariate_model, &self.table) {
            (CovariateModel::Exact { law }, _) => {
                let role = LawRole::Covariate { bins: self.world.prognosis_thresholds.len() + 1 };
                law.probabilities(role, k, bin, l, a, out);
            }
            (_, Some(table)) => {
                let key = (k, bin, l.to_vec(), a.to_vec());
                let probs = table.get(&key).ok_or_else(|| Error::UndefinedCell(cell_name(k, bin, l, a)))?;
                out.clear();
                out.extend_from_slice(probs);
            }
            _ => unreachable!("estimated models always carry a table"),
        }
        Ok(())
    }

    fn path(&self, g: &TreatmentRegime, seed: u64, index: u64) -> Result<SimulatedPath> {
        let mut rng = stream(seed, "cfsim.draw", index);
        let t0 = self.draw_t0(&mut rng);
        let bin = self.world.bin_of(t0);
        let grid = &self.world.grid;
        let mut l = Vec::with_capacity(grid.visits());
        let mut a = Vec::with_capacity(grid.visits());
        let mut probs = Vec::new();
        let mut v = t0;
        for k in 0..=grid.horizon() {
            self.covariate_probs(k, bin, &l, &a, &mut probs)?;
            l.push(categorical(&probs, open01(&mut rng)) as Code);
            let dose = g.dose(&l);
            if dose >= self.world.treatment_levels {
                return Err(Error::InvalidConfig(format!("regime prescribes dose {dose} outside 0..{}", self.world.treatment_levels)));
            }
            a.push(dose);
            match self.model.blip_up_step(k, &l, &a, v)? {
                BlipStep::Settled(t) => {
                    return Ok(SimulatedPath { trajectory: Trajectory { covariates: l, treatments: a, event_time: t }, t0 });
                }
                BlipStep::Continue(next) => v = next,
            }
        }
        unreachable!("the last interval is unbounded")
    }
}

/// `n` counterfactual records under `g`; draw `i` always uses stream `i`.
pub fn simulate_paths(world: &FittedWorld, g: &TreatmentRegime, n: usize, seed: u64) -> Result<Vec<SimulatedPath>> {
    if n == 0 {
        return Err(Error::InvalidConfig("number of draws must be at least 1".into()));
    }
    let sampler = Sampler::new(world)?;
    (0..n as u64).into_par_iter().map(|i| sampler.path(g, seed, i)).collect()
}

/// Survival curve of `T̃^g` at `times` and its sample mean.
pub fn simulate_counterfactual(world: &FittedWorld, g: &TreatmentRegime, n: usize, seed: u64, times: &[f64]) -> Result<CounterfactualSummary> {
    let paths = simulate_paths(world, g, n, seed)?;
    let samples: Vec<f64> = paths.iter().map(|p| p.trajectory.event_time).collect();
    let mean = crate::stats::mean(&samples);
    let mean_se = crate::stats::std_dev(&samples) / (n as f64).sqrt();
    Ok(CounterfactualSummary {
        schema_version: CFSIM_SCHEMA_VERSION,
        regime: g.clone(),
        seed,
        draws: n,
        mean,
        mean_se,
        curve: EstimatedCurve::from_samples(&samples, times),
    })
}
