//! Fully parametric likelihood inference for the shift parameter.
//!
//! The observed-data density factors through the blipped-down time
//! `t₀ = T₀^{γ_ψ}`:
//! `f(t, l̄, ā) = ∂t₀/∂t · f_{T₀}(t₀) · Π_k P(L_k | l̄_{k-1}, ā_{k-1}, t₀) · Π_k P(A_k | …)`.
//! The treatment factors do not involve `ψ` and are dropped. `f_{T₀}` is
//! piecewise exponential and the covariate law is a multinomial logit with
//! features `[1, bin indicators of t₀, l_{k-1}, a_{k-1}]`. For fixed `ψ` both
//! nuisance blocks have closed-form or concave maximizers, so `ψ` is found by
//! maximizing the profile likelihood.
//!
//! A piecewise hazard with several rates or a non-empty threshold list makes
//! the density jump at `ψ`-dependent points; the likelihood is then
//! non-regular and the fit may stop at a kink (`stationary = false`).

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{covariate_features, logit_probabilities, CategoricalLaw, DgpConfig};
use crate::error::{Error, Result};
use crate::history::{Code, Cohort, Trajectory};
use crate::logistic::{fit_multinomial, invert_spd, MultinomialFit};
use crate::snftm::{FeatureMap, ShiftFeatures, ShiftModel};
use crate::stats::ChiSquareTest;
use crate::survival::SurvivalCurve;

pub const MLE_SCHEMA_VERSION: u32 = 1;
const CHUNK: usize = 1024;
pub const GRADIENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricModel {
    pub shift_features: ShiftFeatures,
    pub psi: Vec<f64>,
    /// Law of `T₀^γ`; the breaks are fixed, the rates are estimated.
    pub baseline: SurvivalCurve,
    /// Cut points binning `t₀` in the covariate model.
    #[serde(default)]
    pub covariate_thresholds: Vec<f64>,
    pub covariate_levels: Code,
    /// One row per non-reference covariate level; empty means all zero.
    #[serde(default)]
    pub covariate_coefficients: Vec<Vec<f64>>,
}

impl ParametricModel {
    /// The correctly specified model of a dgp with a logit covariate law, at
    /// its true parameters.
    pub fn from_dgp(cfg: &DgpConfig) -> Result<Self> {
        let CategoricalLaw::Logit { coefficients } = &cfg.covariate_law else {
            return Err(Error::Unsupported("parametric model needs a logit covariate law".into()));
        };
        Ok(Self {
            shift_features: cfg.shift_features,
            psi: cfg.psi0.clone(),
            baseline: cfg.baseline.clone(),
            covariate_thresholds: cfg.prognosis_thresholds.clone(),
            covariate_levels: cfg.covariate_levels,
            covariate_coefficients: coefficients.clone(),
        })
    }

    pub fn bins(&self) -> usize {
        self.covariate_thresholds.len() + 1
    }

    pub fn bin_of(&self, t0: f64) -> usize {
        self.covariate_thresholds.partition_point(|&c| c < t0)
    }

    fn feature_dim(&self) -> usize {
        self.bins() + 2
    }

    fn validate(&self) -> Result<()> {
        if self.psi.len() != self.shift_features.dim() {
            return Err(Error::InvalidConfig(format!("ψ has {} entries, the shift model needs {}", self.psi.len(), self.shift_features.dim())));
        }
        if self.covariate_levels == 0 {
            return Err(Error::InvalidConfig("covariate_levels must be positive".into()));
        }
        if self.baseline.start() != 0.0 {
            return Err(Error::InvalidConfig("baseline law must start at 0".into()));
        }
        if self.covariate_thresholds.windows(2).any(|w| !(w[0] < w[1])) || self.covariate_thresholds.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidConfig("covariate thresholds must be positive and increasing".into()));
        }
        let rows = self.covariate_levels as usize - 1;
        if !self.covariate_coefficients.is_empty()
            && (self.covariate_coefficients.len() != rows || self.covariate_coefficients.iter().any(|r| r.len() != self.feature_dim()))
        {
            return Err(Error::InvalidConfig(format!("covariate coefficients must be {rows} rows of {} entries", self.feature_dim())));
        }
        Ok(())
    }

    fn shift_model(&self, grid: &crate::grid::TimeGrid) -> Result<ShiftModel> {
        ShiftModel::new(grid.clone(), self.psi.clone(), self.shift_features)
    }

    fn coefficients(&self) -> Vec<Vec<f64>> {
        if self.covariate_coefficients.is_empty() {
            vec![vec![0.0; self.feature_dim()]; self.covariate_levels as usize - 1]
        } else {
            self.covariate_coefficients.clone()
        }
    }
}

/// `log ∂t₀/∂t + log f_{T₀}(t₀) + Σ_k log P(L_k | past, t₀)` at one trajectory.
pub fn log_density(model: &ParametricModel, grid: &crate::grid::TimeGrid, traj: &Trajectory) -> Result<f64> {
    model.validate()?;
    let shift = model.shift_model(grid)?;
    let d = shift.blip_down_with_derivatives(traj);
    let mut total = d.log_jacobian + model.baseline.log_density(d.t0);
    let coef = model.coefficients();
    let bin = model.bin_of(d.t0);
    let (mut x, mut probs) = (Vec::new(), Vec::new());
    for k in 0..traj.covariates.len() {
        covariate_features(model.bins(), bin, &traj.covariates[..k], &traj.treatments[..k], &mut x);
        logit_probabilities(&coef, &x, &mut probs);
        let p = probs[traj.covariates[k] as usize];
        if !(p > 0.0) {
            return Err(Error::StructuralZero(format!("P(L_{k} = {}) = 0 under the covariate model", traj.covariates[k])));
        }
        total += p.ln();
    }
    if !total.is_finite() {
        return Err(Error::StructuralZero(format!("log-density is {total} at t₀ = {}", d.t0)));
    }
    Ok(total)
}

/// Nuisance estimates and profile log-likelihood at one `ψ`.
#[derive(Debug, Clone)]
pub struct Profile {
    pub psi: Vec<f64>,
    pub loglik: f64,
    pub rates: Vec<f64>,
    pub events: Vec<f64>,
    pub exposure: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    /// Almost-everywhere gradient in `ψ` (nuisances held at their profile values).
    pub gradient: Vec<f64>,
}

struct SubjectBlip {
    t0: f64,
    log_jacobian: f64,
    dt0: Vec<f64>,
    dlog: Vec<f64>,
}

/// Profile likelihood machinery for one cohort and model structure.
pub struct Likelihood<'a> {
    cohort: &'a Cohort,
    model: ParametricModel,
    /// Per covariate record: subject, `l_k`, and the bin-free feature tail.
    records: Vec<(usize, u32, [f64; 2])>,
    multinomial_cache: Mutex<Option<(Vec<usize>, MultinomialFit)>>,
    fit_tol: f64,
}

impl<'a> Likelihood<'a> {
    pub fn new(cohort: &'a Cohort, structure: &ParametricModel) -> Result<Self> {
        structure.validate()?;
        if cohort.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if structure.covariate_levels != cohort.alphabets.covariate_size() {
            return Err(Error::InvalidConfig(format!(
                "model has {} covariate levels, the cohort {}",
                structure.covariate_levels,
                cohort.alphabets.covariate_size()
            )));
        }
        let mut records = Vec::new();
        for (i, s) in cohort.subjects.iter().enumerate() {
            for k in 0..s.covariates.len() {
                let prev_l = if k > 0 { s.covariates[k - 1] as f64 } else { 0.0 };
                let prev_a = if k > 0 { s.treatments[k - 1] as f64 } else { 0.0 };
                records.push((i, s.covariates[k], [prev_l, prev_a]));
            }
        }
        Ok(Self { cohort, model: structure.clone(), records, multinomial_cache: Mutex::new(None), fit_tol: 1e-9 })
    }

    fn blips(&self, psi: &[f64]) -> Result<Vec<SubjectBlip>> {
        let shift = ShiftModel::new(self.cohort.grid.clone(), psi.to_vec(), self.model.shift_features)?;
        Ok(self
            .cohort
            .subjects
            .par_iter()
            .map(|s| {
                let d = shift.blip_down_with_derivatives(s);
                SubjectBlip { t0: d.t0, log_jacobian: d.log_jacobian, dt0: d.dt0_dpsi, dlog: d.dlog_jacobian_dpsi }
            })
            .collect())
    }

    fn covariate_fit(&self, bins: Vec<usize>) -> Result<MultinomialFit> {
        let levels = self.model.covariate_levels as usize;
        if levels == 1 {
            return Ok(MultinomialFit { coef: Vec::new(), information: DMatrix::zeros(0, 0), loglik: 0.0, score_norm: 0.0 });
        }
        let mut cache = self.multinomial_cache.lock().expect("cache lock");
        if let Some((key, fit)) = cache.as_ref() {
            if *key == bins {
                return Ok(fit.clone());
            }
        }
        let dim = self.model.feature_dim();
        let mut x = Vec::with_capacity(self.records.len() * dim);
        let mut y = Vec::with_capacity(self.records.len());
        for &(i, l, tail) in &self.records {
            x.push(1.0);
            for b in 1..self.model.bins() {
                x.push(if bins[i] == b { 1.0 } else { 0.0 });
            }
            x.extend(tail);
            y.push(l);
        }
        let fit = fit_multinomial(&x, dim, &y, levels, self.fit_tol * self.records.len().max(1) as f64)?;
        *cache = Some((bins, fit.clone()));
        Ok(fit)
    }

    pub fn profile(&self, psi: &[f64]) -> Result<Profile> {
        let blips = self.blips(psi)?;
        let breaks = self.model.baseline.breaks();
        let pieces = breaks.len();
        let mut events = vec![0.0; pieces];
        let mut exposure = vec![0.0; pieces];
        // chunked partial sums keep results independent of the thread count
        let partial: Vec<(Vec<f64>, Vec<f64>, f64)> = blips
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ev = vec![0.0; pieces];
                let mut ex = vec![0.0; pieces];
                let mut lj = 0.0;
                for b in chunk {
                    let j = self.model.baseline.piece_index(b.t0);
                    ev[j] += 1.0;
                    for m in 0..=j {
                        let hi = if m + 1 < pieces { breaks[m + 1].min(b.t0) } else { b.t0 };
                        ex[m] += hi - breaks[m];
                    }
                    lj += b.log_jacobian;
                }
                (ev, ex, lj)
            })
            .collect();
        let mut log_jacobian = 0.0;
        for (ev, ex, lj) in partial {
            for j in 0..pieces {
                events[j] += ev[j];
                exposure[j] += ex[j];
            }
            log_jacobian += lj;
        }
        if let Some(j) = events.iter().position(|&e| e == 0.0) {
            return Err(Error::NonIdentifiable(format!("no blipped-down event times fall in baseline piece {j}")));
        }
        let rates: Vec<f64> = events.iter().zip(&exposure).map(|(e, x)| e / x).collect();
        let baseline_ll: f64 = (0..pieces).map(|j| events[j] * rates[j].ln() - rates[j] * exposure[j]).sum();

        let bins: Vec<usize> = blips.iter().map(|b| self.model.bin_of(b.t0)).collect();
        let cov = self.covariate_fit(bins)?;

        let d = psi.len();
        let grads: Vec<Vec<f64>> = blips
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; d];
                for b in chunk {
                    let rate = rates[self.model.baseline.piece_index(b.t0)];
                    for j in 0..d {
                        g[j] += b.dlog[j] - rate * b.dt0[j];
                    }
                }
                g
            })
            .collect();
        let mut gradient = vec![0.0; d];
        for g in grads {
            for j in 0..d {
                gradient[j] += g[j];
            }
        }
        Ok(Profile {
            psi: psi.to_vec(),
            loglik: log_jacobian + baseline_ll + cov.loglik,
            rates,
            events,
            exposure,
            coefficients: cov.coef,
            gradient,
        })
    }

    /// Observed profile information `−∂²ℓ_p/∂ψ²` from central differences of
    /// the analytic gradient.
    pub fn information(&self, psi: &[f64]) -> Result<DMatrix<f64>> {
        let d = psi.len();
        let mut h = DMatrix::zeros(d, d);
        for j in 0..d {
            let step = 1e-5 * psi[j].abs().max(1.0);
            let mut hi = psi.to_vec();
            let mut lo = psi.to_vec();
            hi[j] += step;
            lo[j] -= step;
            let gh = self.profile(&hi)?.gradient;
            let gl = self.profile(&lo)?.gradient;
            for i in 0..d {
                h[(i, j)] = -(gh[i] - gl[i]) / (2.0 * step);
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    pub fn model_at(&self, profile: &Profile) -> Result<ParametricModel> {
        let mut m = self.model.clone();
        m.psi = profile.psi.clone();
        m.baseline = SurvivalCurve::new(self.model.baseline.breaks().to_vec(), profile.rates.clone())?;
        m.covariate_coefficients = profile.coefficients.clone();
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub schema_version: u32,
    pub model: ParametricModel,
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub gradient_norm: f64,
    /// False when the optimizer stopped at a kink of a non-regular likelihood.
    pub stationary: bool,
    /// Observed profile information for `ψ`.
    pub information: Vec<Vec<f64>>,
    /// Absent when the information is not positive definite (only possible
    /// for non-regular models).
    pub se: Option<Vec<f64>>,
    pub evaluations: usize,
}

impl MleFit {
    fn information_matrix(&self) -> DMatrix<f64> {
        let d = self.information.len();
        DMatrix::from_fn(d, d, |i, j| self.information[i][j])
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Nelder–Mead maximization of `f` from `start` with initial edge `scale`.
fn nelder_mead(f: &mut dyn FnMut(&[f64]) -> Result<f64>, start: &[f64], scale: f64, max_evals: usize, evals: &mut usize) -> Result<(Vec<f64>, f64)> {
    let d = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let mut value = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        // points outside the parameter space (e.g. an empty baseline piece) rank last
        match f(x) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::NonIdentifiable(_)) | Err(Error::Divergence(_)) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    };
    simplex.push((start.to_vec(), value(start, evals)?));
    for j in 0..d {
        let mut x = start.to_vec();
        x[j] += scale;
        let v = value(&x, evals)?;
        simplex.push((x, v));
    }
    let used = *evals;
    while *evals - used < max_evals {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let spread = simplex.iter().skip(1).map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        if spread < 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|(x, _)| x[j]).sum::<f64>() / d as f64).collect();
        let worst = simplex[d].clone();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let vr = value(&xr, evals)?;
        if vr > simplex[0].1 {
            let xe = along(2.0);
            let ve = value(&xe, evals)?;
            simplex[d] = if ve > vr { (xe, ve) } else { (xr, vr) };
        } else if vr > simplex[d - 1].1 {
            simplex[d] = (xr, vr);
        } else {
            let (xc, vc) = if vr > worst.1 {
                let x = along(0.5);
                let v = value(&x, evals)?;
                (x, v)
            } else {
                let x = along(-0.5);
                let v = value(&x, evals)?;
                (x, v)
            };
            if vc > worst.1.max(vr) {
                simplex[d] = (xc, vc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&item.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    let v = value(&x, evals)?;
                    *item = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(simplex.swap_remove(0))
}

/// Maximum likelihood fit starting from `init.psi`.
pub fn fit(cohort: &Cohort, init: &ParametricModel) -> Result<MleFit> {
    fit_with_tolerance(cohort, init, GRADIENT_TOL)
}

/// As [`fit`], declaring stationarity once the gradient norm drops below
/// `gradient_tol`.
pub fn fit_with_tolerance(cohort: &Cohort, init: &ParametricModel, gradient_tol: f64) -> Result<MleFit> {
    if !(gradient_tol > 0.0) {
        return Err(Error::InvalidConfig(format!("gradient tolerance must be positive, got {gradient_tol}")));
    }
    check_identifiable(cohort, init)?;
    let lik = Likelihood::new(cohort, init)?;
    let regular = init.baseline.breaks().len() == 1 && init.covariate_thresholds.is_empty();
    let mut evaluations = 0;
    let mut objective = |x: &[f64]| -> Result<f64> { Ok(lik.profile(x)?.loglik) };

    let mut best = (init.psi.clone(), f64::NEG_INFINITY);
    let mut scale = 0.25;
    for _ in 0..4 {
        let (x, v) = nelder_mead(&mut objective, &best.0, scale, 400 * init.psi.len(), &mut evaluations)?;
        if v > best.1 {
            best = (x, v);
        }
        scale *= 0.2;
    }
    if !best.1.is_finite() {
        return Err(Error::Convergence { message: "profile likelihood is not finite near the starting point".into(), best: best.0 });
    }

    // Newton polish on the analytic gradient
    let mut profile = lik.profile(&best.0)?;
    evaluations += 1;
    for _ in 0..50 {
        let norm = profile.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < gradient_tol {
            break;
        }
        let info = lik.information(&profile.psi)?;
        evaluations += 2 * profile.psi.len();
        let Some(chol) = info.cholesky() else { break };
        let step = chol.solve(&DVector::from_column_slice(&profile.gradient));
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = profile.psi.iter().zip(step.iter()).map(|(p, s)| p + t * s).collect();
            evaluations += 1;
            if let Ok(p) = lik.profile(&trial) {
                let new_norm = p.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
                if p.loglik >= profile.loglik - 1e-10 * profile.loglik.abs() && (p.loglik > profile.loglik || new_norm < norm) {
                    profile = p;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let gradient_norm = profile.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    let stationary = gradient_norm < gradient_tol;
    if !stationary && regular {
        return Err(Error::Convergence { message: format!("gradient norm {gradient_norm:e} after the optimization budget"), best: profile.psi });
    }
    let info = lik.information(&profile.psi)?;
    let se = match invert_spd(&info) {
        Ok(cov) => Some((0..cov.nrows()).map(|i| cov[(i, i)].sqrt()).collect()),
        Err(e) if regular => return Err(e),
        Err(_) => None,
    };
    Ok(MleFit {
        schema_version: MLE_SCHEMA_VERSION,
        model: lik.model_at(&profile)?,
        loglik: profile.loglik,
        gradient: profile.gradient.clone(),
        gradient_norm,
        stationary,
        information: matrix_rows(&info),
        se,
        evaluations,
    })
}

/// The restricted fit at `ψ = 0`: nuisances profiled, no search.
pub fn fit_restricted(cohort: &Cohort, init: &ParametricModel) -> Result<(Profile, DMatrix<f64>)> {
    let lik = Likelihood::new(cohort, init)?;
    let zero = vec![0.0; init.psi.len()];
    Ok((lik.profile(&zero)?, lik.information(&zero)?))
}

fn check_identifiable(cohort: &Cohort, init: &ParametricModel) -> Result<()> {
    let first = cohort.subjects.first().ok_or(Error::EmptyCohort)?;
    if cohort.subjects.iter().all(|s| s == first) {
        return Err(Error::NonIdentifiable("all trajectories are identical".into()));
    }
    let d = init.shift_features.dim();
    let mut x = vec![0.0; d];
    let mut seen = vec![false; d];
    for s in &cohort.subjects {
        for k in 0..s.covariates.len() {
            init.shift_features.features(k, &s.covariates, &s.treatments, &mut x);
            for j in 0..d {
                seen[j] |= x[j] != 0.0;
            }
        }
    }
    if let Some(j) = seen.iter().position(|&s| !s) {
        return Err(Error::NonIdentifiable(format!("shift feature {j} is zero on every visit")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullTestReport {
    pub schema_version: u32,
    pub loglik: f64,
    pub loglik_restricted: f64,
    pub wald: ChiSquareTest,
    pub score: ChiSquareTest,
    pub likelihood_ratio: ChiSquareTest,
}

/// Wald, score and likelihood-ratio tests of `ψ = 0`.
pub fn test_null(fitted: &MleFit, restricted: &Profile, restricted_information: &DMatrix<f64>) -> Result<NullTestReport> {
    let d = fitted.model.psi.len();
    let lr = 2.0 * (fitted.loglik - restricted.loglik);
    if lr < -1e-8 {
        return Err(Error::OptimizationFailure(format!("restricted log-likelihood exceeds the unrestricted one by {:e}", -lr / 2.0)));
    }
    let psi = DVector::from_column_slice(&fitted.model.psi);
    let wald = (psi.transpose() * fitted.information_matrix() * &psi)[(0, 0)];
    let u = DVector::from_column_slice(&restricted.gradient);
    let score = (u.transpose() * invert_spd(restricted_information)? * &u)[(0, 0)];
    Ok(NullTestReport {
        schema_version: MLE_SCHEMA_VERSION,
        loglik: fitted.loglik,
        loglik_restricted: restricted.loglik,
        wald: ChiSquareTest::new(wald, d),
        score: ChiSquareTest::new(score, d),
        likelihood_ratio: ChiSquareTest::new(lr.max(0.0), d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_finds_quadratic_maximum() {
        let mut evals = 0;
        let mut f = |x: &[f64]| -> Result<f64> { Ok(-(x[0] - 1.0).powi(2) - 3.0 * (x[1] + 0.5).powi(2) - x[0] * x[1]) };
        let (x, _) = nelder_mead(&mut f, &[0.0, 0.0], 0.5, 2000, &mut evals).unwrap();
        // stationary point of the quadratic: [-2 -1; -1 -6] x = [-2; 3]
        let det = 12.0 - 1.0;
        let expected = [(-2.0 * -6.0 - (-1.0 * 3.0)) / det, (-2.0 * 3.0 - (-1.0 * -2.0)) / det];
        assert!((x[0] - expected[0]).abs() < 1e-8 && (x[1] - expected[1]).abs() < 1e-8, "{x:?} vs {expected:?}");
    }
}
