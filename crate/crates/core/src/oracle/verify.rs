use serde::{Deserialize, Serialize};

use super::EnumeratedWorld;
use crate::error::Result;
use crate::gcomp::{s_conditional, s_conditional_curve, s_marginal_curve};
use crate::history::{for_each_sequence, Code};
use crate::laws::ConditionalLaws;
use crate::regime::{enumerate_regimes, is_evaluable, sample_regimes, TreatmentRegime};
use crate::snftm::{ShiftModel, StageInverse};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const MAX_LISTED_FAILURES: usize = 20;

/// Outcome of one numerical identity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    /// False when the premise of the check does not hold for this instance.
    pub applicable: bool,
    pub worst_deviation: f64,
    pub tolerance: f64,
    pub comparisons: usize,
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: true,
            applicable: true,
            worst_deviation: 0.0,
            tolerance,
            comparisons: 0,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Records `|deviation| < tolerance`.
    fn record(&mut self, deviation: f64, context: impl FnOnce() -> String) {
        self.comparisons += 1;
        let d = deviation.abs();
        if d > self.worst_deviation || d.is_nan() {
            self.worst_deviation = d;
        }
        if !(d < self.tolerance) {
            self.passed = false;
            if self.failures.len() < MAX_LISTED_FAILURES {
                self.failures.push(format!("{} (deviation {d:e})", context()));
            }
        }
    }

    fn not_applicable(mut self, why: &str) -> Self {
        self.applicable = false;
        self.notes.push(why.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn new(suite: &str, checks: Vec<CheckReport>) -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, suite: suite.into(), passed: checks.iter().all(|c| c.passed), checks }
    }
}

/// The regimes a verification pass iterates over.
#[derive(Debug, Clone)]
pub struct RegimeSet {
    pub regimes: Vec<TreatmentRegime>,
    /// True when every deterministic regime is included.
    pub exhaustive: bool,
    pub seed: Option<u64>,
}

impl RegimeSet {
    /// All regimes when there are at most `cap`, else `sample` of them drawn with `seed`.
    pub fn for_world(world: &EnumeratedWorld, cap: u128, sample: usize, seed: u64) -> Self {
        let cfg = world.dgp().config();
        match enumerate_regimes(world.grid(), cfg.covariate_levels, cfg.treatment_levels, cap) {
            Some(regimes) => Self { regimes, exhaustive: true, seed: None },
            None => Self {
                regimes: sample_regimes(world.grid(), cfg.covariate_levels, cfg.treatment_levels, sample, seed),
                exhaustive: false,
                seed: Some(seed),
            },
        }
    }

    fn describe(&self) -> String {
        match self.seed {
            None => format!("all {} deterministic regimes", self.regimes.len()),
            Some(seed) => format!("random subset of {} regimes (seed {seed})", self.regimes.len()),
        }
    }
}

fn evaluable_regimes<'a>(world: &EnumeratedWorld, regimes: &'a [TreatmentRegime]) -> Result<(Vec<&'a TreatmentRegime>, usize)> {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for g in regimes {
        if is_evaluable(g, world)? {
            kept.push(g);
        } else {
            skipped += 1;
        }
    }
    Ok((kept, skipped))
}

/// G-computation identities: marginal and conditional identification, and
/// invariance to the treatment law.
pub fn verify_gcomputation(world: &EnumeratedWorld, regimes: &RegimeSet, times: &[f64]) -> Result<Vec<CheckReport>> {
    let laws = world.conditional_laws()?;
    let grid = world.grid().clone();
    let (evaluable, skipped) = evaluable_regimes(world, &regimes.regimes)?;

    let mut marginal = CheckReport::new("gcomp_marginal_identification", 1e-10);
    let mut conditional = CheckReport::new("gcomp_conditional_identification", 1e-10);
    let mut invariance = CheckReport::new("gcomp_treatment_law_invariance", 1e-12);
    for c in [&mut marginal, &mut conditional, &mut invariance] {
        c.notes.push(format!("{}; {skipped} non-evaluable regimes skipped", regimes.describe()));
    }

    let perturbed_dgp = {
        let mut cfg = world.dgp().config().clone();
        let levels = cfg.treatment_levels as usize;
        cfg.treatment_law = crate::dgp::CategoricalLaw::Table { default: vec![1.0 / levels as f64; levels], entries: vec![] };
        crate::dgp::Dgp::new(cfg)?
    };
    let perturbed = EnumeratedWorld::new(perturbed_dgp)?.conditional_laws()?;

    for (gi, g) in evaluable.iter().enumerate() {
        let s = s_marginal_curve(&laws, g, times)?;
        let exact = world.counterfactual_survival_curve(g, times)?;
        for (i, &t) in times.iter().enumerate() {
            marginal.record(s[i] - exact[i], || format!("regime #{gi} at t={t}"));
        }
        let s2 = s_marginal_curve(&perturbed, g, times)?;
        for (i, &t) in times.iter().enumerate() {
            invariance.record(s[i] - s2[i], || format!("regime #{gi} at t={t}"));
        }
        for k in 0..=grid.horizon() {
            let later: Vec<f64> = times.iter().copied().filter(|&t| t > grid.tau(k)).collect();
            if later.is_empty() {
                continue;
            }
            let mut failure = None;
            for_each_sequence(world.dgp().config().covariate_levels, k + 1, |l| {
                if failure.is_some() {
                    return;
                }
                let mut run = || -> Result<()> {
                    let mut exact = Vec::with_capacity(later.len());
                    for &t in &later {
                        match world.counterfactual_conditional_survival(g, l, t)? {
                            Some(v) => exact.push(v),
                            None => return Ok(()),
                        }
                    }
                    let s = s_conditional_curve(&laws, g, l, &later)?;
                    for (i, &t) in later.iter().enumerate() {
                        conditional.record(s[i] - exact[i], || format!("regime #{gi}, l̄={l:?}, t={t}"));
                    }
                    Ok(())
                };
                if let Err(e) = run() {
                    failure = Some(e);
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }
    }
    Ok(vec![marginal, conditional, invariance])
}

/// `Σ P(cell at risk) · P(T_{k0}^γ > x, T in its interval | cell)` over the
/// cell `(l, a)` and all its continuations.
fn blipped_tail(world: &EnumeratedWorld, laws: &ConditionalLaws, model: &ShiftModel, k0: usize, l: &mut Vec<Code>, a: &mut Vec<Code>, x: f64) -> f64 {
    let m = l.len() - 1;
    let mass = world.at_risk(l, a);
    if mass <= 0.0 {
        return 0.0;
    }
    let grid = world.grid();
    let curve = laws.interval(l, a).expect("positive cells carry interval laws");
    let up = grid.upper(m);
    let end = if up.is_finite() { curve.eval(up) } else { 0.0 };
    let piece = match model.stage_inverse(k0, m, l, a, x) {
        StageInverse::Below => 1.0 - end,
        StageInverse::Within(y) => curve.eval(y) - end,
        StageInverse::Above => 0.0,
    };
    let mut total = mass * piece;
    if m < grid.horizon() {
        let cfg = world.dgp().config();
        for next_l in 0..cfg.covariate_levels {
            for next_a in 0..cfg.treatment_levels {
                l.push(next_l);
                a.push(next_a);
                total += blipped_tail(world, laws, model, k0, l, a, x);
                l.pop();
                a.pop();
            }
        }
    }
    total
}

/// Distributional identities of the blipped-down times computed with shift
/// parameter `psi`: the law of `T₀^γ`, the no-unmeasured-confounding
/// factorization, and the conditional law of `T_k^γ`.
pub fn verify_blip_theorems(world: &EnumeratedWorld, psi: &[f64], times: &[f64]) -> Result<Vec<CheckReport>> {
    let laws = world.conditional_laws()?;
    let grid = world.grid().clone();
    let cfg = world.dgp().config();
    let model = ShiftModel::new(grid.clone(), psi.to_vec(), cfg.shift_features)?;
    let (nl, na) = (cfg.covariate_levels, cfg.treatment_levels);

    let mut law = CheckReport::new("blip_baseline_law", 1e-12);
    let baseline = s_marginal_curve(&laws, &TreatmentRegime::baseline(), times)?;
    for (i, &x) in times.iter().enumerate() {
        let mut lhs = 0.0;
        for l0 in 0..nl {
            for a0 in 0..na {
                lhs += blipped_tail(world, &laws, &model, 0, &mut vec![l0], &mut vec![a0], x);
            }
        }
        law.record(lhs - baseline[i], || format!("P(T₀^γ > {x}) vs s_0̄"));
    }

    let mut indep = CheckReport::new("blip_treatment_independence", 1e-12);
    let mut appendix = CheckReport::new("blip_conditional_law", 1e-12);
    for k in 0..=grid.horizon() {
        let later: Vec<f64> = times.iter().copied().filter(|&t| t > grid.tau(k)).collect();
        for_each_sequence(nl, k + 1, |l| {
            for_each_sequence(na, k, |prior| {
                let masses: Vec<f64> = (0..na)
                    .map(|a| {
                        let mut full = prior.to_vec();
                        full.push(a);
                        world.at_risk(l, &full)
                    })
                    .collect();
                let total: f64 = masses.iter().sum();
                if !(total > 0.0) {
                    return;
                }
                // conditional law of T₀^γ given the cell, for each dose and pooled
                for &x in times {
                    let joint: Vec<f64> = (0..na)
                        .map(|a| {
                            let mut full = prior.to_vec();
                            full.push(a);
                            blipped_tail(world, &laws, &model, 0, &mut l.to_vec(), &mut full, x)
                        })
                        .collect();
                    let pooled = joint.iter().sum::<f64>() / total;
                    for a in 0..na as usize {
                        if masses[a] > 0.0 {
                            indep.record(joint[a] / masses[a] - pooled, || format!("k={k}, l̄={l:?}, ā_(k-1)={prior:?}, a_k={a}, x={x}"));
                        }
                    }
                }
                let reference = TreatmentRegime::prefix_then_zero(prior);
                let expected = s_conditional_curve(&laws, &reference, l, &later).expect("cell with positive mass");
                for a in 0..na as usize {
                    if masses[a] <= 0.0 {
                        continue;
                    }
                    let mut full = prior.to_vec();
                    full.push(a as Code);
                    for (i, &t) in later.iter().enumerate() {
                        let v = blipped_tail(world, &laws, &model, k, &mut l.to_vec(), &mut full.clone(), t) / masses[a];
                        appendix.record(v - expected[i], || format!("k={k}, l̄={l:?}, ā={full:?}, t={t}"));
                    }
                }
            });
        });
    }
    Ok(vec![law, indep, appendix])
}

/// `s_A⁻¹(u)` for a decreasing conditional survival function, by bisection.
fn conditional_quantile(laws: &ConditionalLaws, g: &TreatmentRegime, l: &[Code], start: f64, u: f64) -> Result<f64> {
    let mut lo = start;
    let mut hi = start + 1.0;
    let mut guard = 0;
    while s_conditional(laws, g, l, hi)? > u {
        lo = hi;
        hi = start + 2.0 * (hi - start);
        guard += 1;
        if guard > 200 {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if s_conditional(laws, g, l, mid)? > u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The shift function defined from the observed law,
/// `γ(t) = s⁻¹_{l̄_k,(ā_{k-1},0̄)}(s_{l̄_k,(ā_k,0̄)}(t))`.
pub fn observed_shift(laws: &ConditionalLaws, l: &[Code], a: &[Code], t: f64) -> Result<f64> {
    let k = l.len() - 1;
    let with_dose = TreatmentRegime::prefix_then_zero(a);
    let without = TreatmentRegime::prefix_then_zero(&a[..k]);
    let u = s_conditional(laws, &with_dose, l, t)?;
    conditional_quantile(laws, &without, l, laws.grid().tau(k), u)
}

/// The G-null equivalence: identity shifts on positive cells force one common
/// survival curve; a non-identity shift yields a pair of regimes whose curves
/// differ.
pub fn verify_null_equivalence(world: &EnumeratedWorld, regimes: &RegimeSet, times: &[f64]) -> Result<Vec<CheckReport>> {
    let laws = world.conditional_laws()?;
    let grid = world.grid().clone();
    let model = world.dgp().model();
    let cells = world.positive_cells();
    let structural_identity = cells.iter().all(|c| {
        let k = c.covariates.len() - 1;
        model.scale(k, &c.covariates, &c.treatments) == 1.0
    });

    let mut recovered = CheckReport::new("null_observed_shift_matches_model", 1e-8);
    let mut witness_cell = None;
    for c in &cells {
        let k = c.covariates.len() - 1;
        for &t in times.iter().filter(|&&t| t > grid.tau(k)) {
            let observed = observed_shift(&laws, &c.covariates, &c.treatments, t)?;
            let structural = model.gamma(k, &c.covariates, &c.treatments, t)?;
            recovered.record((observed - structural) / structural.max(1.0), || format!("cell {c} at t={t}"));
            if witness_cell.is_none() && (observed - t).abs() > 1e-9 {
                witness_cell = Some(c.clone());
            }
        }
    }

    let (evaluable, skipped) = evaluable_regimes(world, &regimes.regimes)?;
    let mut forward = CheckReport::new("null_common_curve", 1e-12);
    if structural_identity {
        forward.notes.push(format!("{}; {skipped} non-evaluable regimes skipped", regimes.describe()));
        let mut lo = vec![f64::INFINITY; times.len()];
        let mut hi = vec![f64::NEG_INFINITY; times.len()];
        for g in &evaluable {
            let exact = world.counterfactual_survival_curve(g, times)?;
            let gform = s_marginal_curve(&laws, g, times)?;
            for i in 0..times.len() {
                for v in [exact[i], gform[i]] {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
            }
        }
        for (i, &t) in times.iter().enumerate() {
            forward.record(hi[i] - lo[i], || format!("spread of regime curves at t={t}"));
        }
    } else {
        forward = forward.not_applicable("some positive-probability cell has a non-identity shift");
    }

    let mut reverse = CheckReport::new("null_witness_pair", 1e-3);
    match witness_cell {
        None => reverse = reverse.not_applicable("all shifts are the identity on positive-probability cells"),
        Some(cell) => {
            let k = cell.covariates.len() - 1;
            let g1 = TreatmentRegime::Path { covariates: cell.covariates.clone(), treatments: cell.treatments.clone() };
            let g2 = TreatmentRegime::Path { covariates: cell.covariates[..k].to_vec(), treatments: cell.treatments[..k].to_vec() };
            let c1 = world.counterfactual_survival_curve(&g1, times)?;
            let c2 = world.counterfactual_survival_curve(&g2, times)?;
            let gap = c1.iter().zip(&c2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            reverse.comparisons = times.len();
            reverse.worst_deviation = gap;
            reverse.passed = gap > reverse.tolerance;
            reverse.notes.push(format!("witness cell {cell}: g¹ = {g1:?}, g² = {g2:?}, max |Δ survival| = {gap:e}"));
            if !reverse.passed {
                reverse.failures.push(format!("curves of the witness pair differ by only {gap:e}"));
            }
        }
    }
    Ok(vec![forward, reverse, recovered])
}

/// Which identities `run_suite` checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gcomp,
    Blip,
    Null,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gcomp => "gcomp",
            Self::Blip => "blip",
            Self::Null => "null",
            Self::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gcomp" => Ok(Self::Gcomp),
            "blip" => Ok(Self::Blip),
            "null" => Ok(Self::Null),
            "all" => Ok(Self::All),
            other => Err(format!("unknown suite {other:?} (expected gcomp, blip, null or all)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub times: Vec<f64>,
    pub regime_cap: u128,
    pub regime_sample: usize,
    pub seed: u64,
}

impl SuiteOptions {
    /// 20 times evenly spaced up to twice the last visit time.
    pub fn for_world(world: &EnumeratedWorld, seed: u64) -> Self {
        let hi = 2.0 * world.grid().tau(world.grid().horizon()).max(1.0);
        Self { times: (1..=20).map(|i| hi * i as f64 / 20.0).collect(), regime_cap: 10_000, regime_sample: 256, seed }
    }
}

/// Runs the checks of `suite` at the world's true `ψ₀`. The blip suite also
/// runs a negative control: with every component of `ψ` moved by 0.5 the
/// factorization must fail.
pub fn run_suite(world: &EnumeratedWorld, suite: Suite, opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let needs_regimes = matches!(suite, Suite::Gcomp | Suite::Null | Suite::All);
    let regimes = needs_regimes.then(|| RegimeSet::for_world(world, opts.regime_cap, opts.regime_sample, opts.seed));
    if matches!(suite, Suite::Gcomp | Suite::All) {
        checks.extend(verify_gcomputation(world, regimes.as_ref().expect("built above"), &opts.times)?);
    }
    if matches!(suite, Suite::Blip | Suite::All) {
        let psi0 = world.dgp().config().psi0.clone();
        checks.extend(verify_blip_theorems(world, &psi0, &opts.times)?);
        let wrong: Vec<f64> = psi0.iter().map(|p| p + 0.5).collect();
        let corrupted = verify_blip_theorems(world, &wrong, &opts.times)?;
        let indep = corrupted.into_iter().find(|c| c.name == "blip_treatment_independence").expect("always reported");
        let mut control = CheckReport::new("blip_negative_control", 1e-12);
        control.comparisons = indep.comparisons;
        control.worst_deviation = indep.worst_deviation;
        control.passed = !indep.passed;
        control.notes.push(format!("factorization with ψ = {wrong:?} deviates by {:e}", indep.worst_deviation));
        if !control.passed {
            control.failures.push("factorization still holds with a corrupted ψ".into());
        }
        checks.push(control);
    }
    if matches!(suite, Suite::Null | Suite::All) {
        checks.extend(verify_null_equivalence(world, regimes.as_ref().expect("built above"), &opts.times)?);
    }
    Ok(SuiteReport::new(suite.name(), checks))
}
