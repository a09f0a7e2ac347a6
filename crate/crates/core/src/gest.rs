//! G-estimation with a pooled logistic treatment model.
//!
//! Person-visit records `(i, k)` with `T_i > τ_k` enter
//! `logit P(A_k = 1) = θ·f_k + α·g_k(T₀^{γ_ψ})` with `f_k = (1, l_k, a_{k-1})`.
//! The augmented features are `c·(1, a_{k-1}, l_k)` truncated to `dim(ψ)`,
//! where `c` is the transformed blipped-down time of the subject. At the
//! true `ψ` the blipped time carries no information on treatment, so `α = 0`.
//!
//! Because the null model does not involve `ψ`, `α̂(ψ) = 0` holds exactly when
//! the score for `α` at the null fit vanishes; roots are located on that score
//! and confirmed with a full fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::Cohort;
use crate::logistic::{fit_binary, invert_spd, LogisticFit};
use crate::snftm::{FeatureMap, ShiftFeatures, ShiftModel};
use crate::stats::ChiSquareTest;

pub const ESTIMATE_SCHEMA_VERSION: u32 = 1;
const F_DIM: usize = 3;

/// The map `g` applied to blipped-down times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TimeTransform {
    /// `min(max(t, lower), upper)`.
    Identity { lower: f64, upper: f64 },
    /// `ln t`.
    Log,
}

impl TimeTransform {
    pub fn apply(&self, t: f64) -> f64 {
        match *self {
            Self::Identity { lower, upper } => t.clamp(lower, upper),
            Self::Log => t.ln(),
        }
    }
}

impl Default for TimeTransform {
    fn default() -> Self {
        Self::Identity { lower: 0.0, upper: 10.0 }
    }
}

fn default_root_tol() -> f64 {
    1e-6
}

fn default_fit_tol() -> f64 {
    1e-10
}

fn default_pitch() -> f64 {
    0.01
}

fn default_level() -> f64 {
    0.05
}

fn default_fd_step() -> f64 {
    1e-4
}

/// Treatment model and search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentModelSpec {
    /// Shift model whose `ψ` is tested or estimated.
    pub shift_features: ShiftFeatures,
    #[serde(default)]
    pub transform: TimeTransform,
    /// Score-norm tolerance of the logistic fits.
    #[serde(default = "default_fit_tol")]
    pub fit_tol: f64,
    /// Tolerance on `‖α̂(ψ̂)‖`.
    #[serde(default = "default_root_tol")]
    pub root_tol: f64,
    /// Grid pitch of the confidence-set inversion.
    #[serde(default = "default_pitch")]
    pub ci_pitch: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Relative finite-difference step of the sandwich derivative.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

impl TreatmentModelSpec {
    pub fn new(shift_features: ShiftFeatures) -> Self {
        Self {
            shift_features,
            transform: TimeTransform::default(),
            fit_tol: default_fit_tol(),
            root_tol: default_root_tol(),
            ci_pitch: default_pitch(),
            level: default_level(),
            fd_step: default_fd_step(),
        }
    }

    pub fn psi_dim(&self) -> usize {
        self.shift_features.dim()
    }
}

/// Pooled person-visit records.
#[derive(Debug, Clone)]
pub struct Records {
    /// Row-major `f_k`.
    pub f: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major multipliers of `c` in the augmented features.
    pub multipliers: Vec<f64>,
    pub subject: Vec<usize>,
    pub q: usize,
    pub subjects: usize,
}

impl Records {
    pub fn build(cohort: &Cohort, q: usize) -> Result<Self> {
        if cohort.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if cohort.alphabets.treatment_levels != 2 {
            return Err(Error::Unsupported(format!(
                "G-estimation needs a binary treatment, the cohort has {} levels",
                cohort.alphabets.treatment_levels
            )));
        }
        let mut r = Records { f: Vec::new(), y: Vec::new(), multipliers: Vec::new(), subject: Vec::new(), q, subjects: cohort.len() };
        for (i, s) in cohort.subjects.iter().enumerate() {
            for k in 0..s.covariates.len() {
                let l = s.covariates[k] as f64;
                let prev = if k > 0 { s.treatments[k - 1] as f64 } else { 0.0 };
                r.f.extend([1.0, l, prev]);
                r.y.push(s.treatments[k] as f64);
                r.multipliers.extend([1.0, prev, l].iter().take(q));
                r.subject.push(i);
            }
        }
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn augmented(&self, c: &[f64], r: usize, out: &mut [f64]) {
        for j in 0..self.q {
            out[j] = c[self.subject[r]] * self.multipliers[r * self.q + j];
        }
    }

    /// Design `[f_k, g_k]` for the full fit.
    fn full_design(&self, c: &[f64]) -> Vec<f64> {
        let d = F_DIM + self.q;
        let mut x = vec![0.0; self.len() * d];
        for r in 0..self.len() {
            x[r * d..r * d + F_DIM].copy_from_slice(&self.f[r * F_DIM..(r + 1) * F_DIM]);
            self.augmented(c, r, &mut x[r * d + F_DIM..(r + 1) * d]);
        }
        x
    }
}

/// `g(T₀^{γ_ψ})` per subject; `None` uses the observed times, so no shift is
/// ever evaluated.
pub fn transformed_times(cohort: &Cohort, spec: &TreatmentModelSpec, psi: Option<&[f64]>) -> Result<Vec<f64>> {
    match psi {
        None => Ok(cohort.subjects.iter().map(|s| spec.transform.apply(s.event_time)).collect()),
        Some(psi) => {
            let model = ShiftModel::new(cohort.grid.clone(), psi.to_vec(), spec.shift_features)?;
            Ok(cohort.subjects.iter().map(|s| spec.transform.apply(model.blip_down(s, 0))).collect())
        }
    }
}

/// Null fit of `A_k` on `f_k` alone, shared by every `ψ`.
#[derive(Debug, Clone)]
pub struct NullFit {
    pub fit: LogisticFit,
    fitted: Vec<f64>,
    info_inv: DMatrix<f64>,
}

impl NullFit {
    pub fn new(records: &Records, tol: f64) -> Result<Self> {
        let fit = fit_binary(&records.f, F_DIM, &records.y, tol)?;
        let fitted = records
            .f
            .chunks_exact(F_DIM)
            .map(|row| {
                let eta: f64 = row.iter().zip(&fit.coef).map(|(a, b)| a * b).sum();
                1.0 / (1.0 + (-eta).exp())
            })
            .collect();
        let info_inv = invert_spd(&fit.information)?;
        Ok(Self { fit, fitted, info_inv })
    }
}

/// Score for `α` at the null fit with its efficient information and the
/// per-subject contributions (raw and residualized on the `θ` score).
#[derive(Debug, Clone)]
pub struct AlphaScore {
    pub score: DVector<f64>,
    pub efficient_information: DMatrix<f64>,
    pub per_subject: Vec<DVector<f64>>,
    pub residualized: Vec<DVector<f64>>,
}

pub fn alpha_score(records: &Records, null: &NullFit, c: &[f64]) -> AlphaScore {
    let q = records.q;
    let mut score = DVector::zeros(q);
    let mut i_gg = DMatrix::zeros(q, q);
    let mut i_gf = DMatrix::zeros(q, F_DIM);
    let mut per_subject = vec![DVector::zeros(q); records.subjects];
    let mut theta_score = vec![DVector::zeros(F_DIM); records.subjects];
    let mut g = vec![0.0; q];
    for r in 0..records.len() {
        records.augmented(c, r, &mut g);
        let p = null.fitted[r];
        let w = p * (1.0 - p);
        let resid = records.y[r] - p;
        let f = &records.f[r * F_DIM..(r + 1) * F_DIM];
        let i = records.subject[r];
        for a in 0..q {
            score[a] += resid * g[a];
            per_subject[i][a] += resid * g[a];
            for b in 0..q {
                i_gg[(a, b)] += w * g[a] * g[b];
            }
            for b in 0..F_DIM {
                i_gf[(a, b)] += w * g[a] * f[b];
            }
        }
        for b in 0..F_DIM {
            theta_score[i][b] += resid * f[b];
        }
    }
    let projection = &i_gf * &null.info_inv;
    let efficient_information = &i_gg - &projection * i_gf.transpose();
    let residualized = per_subject.iter().zip(&theta_score).map(|(h, s)| h - &projection * s).collect();
    AlphaScore { score, efficient_information, per_subject, residualized }
}

/// Score and Wald tests of `α = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GTestReport {
    pub schema_version: u32,
    /// `None` for the G-null test on observed times.
    pub psi: Option<Vec<f64>>,
    pub records: usize,
    pub subjects: usize,
    pub theta_null: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_se: Vec<f64>,
    pub score: ChiSquareTest,
    pub wald: ChiSquareTest,
}

/// Full fit `(θ̂(ψ), α̂(ψ))` with its inverse-information covariance.
#[derive(Debug, Clone)]
pub struct TreatmentFit {
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl TreatmentFit {
    pub fn alpha_se(&self) -> Vec<f64> {
        (0..self.alpha.len()).map(|j| self.covariance[(F_DIM + j, F_DIM + j)].sqrt()).collect()
    }

    pub fn wald(&self) -> Result<ChiSquareTest> {
        let q = self.alpha.len();
        let block = self.covariance.view((F_DIM, F_DIM), (q, q)).into_owned();
        let inv = invert_spd(&block)?;
        let a = DVector::from_column_slice(&self.alpha);
        Ok(ChiSquareTest::new((a.transpose() * inv * &a)[(0, 0)], q))
    }
}

pub fn fit_with_times(records: &Records, c: &[f64], tol: f64) -> Result<TreatmentFit> {
    let d = F_DIM + records.q;
    let fit = fit_binary(&records.full_design(c), d, &records.y, tol)?;
    let covariance = fit.covariance()?;
    Ok(TreatmentFit { theta: fit.coef[..F_DIM].to_vec(), alpha: fit.coef[F_DIM..].to_vec(), covariance })
}

pub fn fit_treatment_model(cohort: &Cohort, spec: &TreatmentModelSpec, psi: &[f64]) -> Result<TreatmentFit> {
    let records = Records::build(cohort, spec.psi_dim())?;
    let c = transformed_times(cohort, spec, Some(psi))?;
    fit_with_times(&records, &c, spec.fit_tol)
}

/// Tests `α = 0` at `psi`; `None` is the G-null test, which uses the observed
/// event times.
pub fn g_test(cohort: &Cohort, spec: &TreatmentModelSpec, psi: Option<&[f64]>) -> Result<GTestReport> {
    let q = spec.psi_dim();
    let records = Records::build(cohort, q)?;
    let c = transformed_times(cohort, spec, psi)?;
    let null = NullFit::new(&records, spec.fit_tol)?;
    let s = alpha_score(&records, &null, &c);
    let v_inv = invert_spd(&s.efficient_information)?;
    let score_stat = (s.score.transpose() * v_inv * &s.score)[(0, 0)];
    let full = fit_with_times(&records, &c, spec.fit_tol)?;
    Ok(GTestReport {
        schema_version: ESTIMATE_SCHEMA_VERSION,
        psi: psi.map(<[f64]>::to_vec),
        records: records.len(),
        subjects: records.subjects,
        theta_null: null.fit.coef.clone(),
        theta: full.theta.clone(),
        alpha: full.alpha.clone(),
        alpha_se: full.alpha_se(),
        score: ChiSquareTest::new(score_stat, q),
        wald: full.wald()?,
    })
}

/// Everything `ψ`-dependent that the search needs, sharing one null fit.
pub struct Estimator<'a> {
    cohort: &'a Cohort,
    spec: &'a TreatmentModelSpec,
    records: Records,
    null: NullFit,
}

impl<'a> Estimator<'a> {
    pub fn new(cohort: &'a Cohort, spec: &'a TreatmentModelSpec) -> Result<Self> {
        let records = Records::build(cohort, spec.psi_dim())?;
        let null = NullFit::new(&records, spec.fit_tol)?;
        Ok(Self { cohort, spec, records, null })
    }

    pub fn records(&self) -> &Records {
        &self.records
    }

    pub fn score(&self, psi: &[f64]) -> Result<AlphaScore> {
        let c = transformed_times(self.cohort, self.spec, Some(psi))?;
        Ok(alpha_score(&self.records, &self.null, &c))
    }

    /// `p`-value of the score test of `α = 0` at `psi`.
    pub fn score_test(&self, psi: &[f64]) -> Result<ChiSquareTest> {
        let s = self.score(psi)?;
        let v_inv = invert_spd(&s.efficient_information)?;
        Ok(ChiSquareTest::new((s.score.transpose() * v_inv * &s.score)[(0, 0)], self.records.q))
    }

    pub fn alpha_hat(&self, psi: &[f64]) -> Result<Vec<f64>> {
        let c = transformed_times(self.cohort, self.spec, Some(psi))?;
        Ok(fit_with_times(&self.records, &c, self.spec.fit_tol)?.alpha)
    }

    /// `Σ_i h_i(ψ)`: the score for `α` at the null fit.
    fn estimating_function(&self, psi: &[f64]) -> Result<DVector<f64>> {
        Ok(self.score(psi)?.score)
    }

    /// Jacobian of `Σ_i h_i` by central differences.
    fn jacobian(&self, psi: &[f64]) -> Result<DMatrix<f64>> {
        let q = psi.len();
        let mut jac = DMatrix::zeros(q, q);
        for j in 0..q {
            let step = self.spec.fd_step * psi[j].abs().max(1.0);
            let mut hi = psi.to_vec();
            let mut lo = psi.to_vec();
            hi[j] += step;
            lo[j] -= step;
            let d = (self.estimating_function(&hi)? - self.estimating_function(&lo)?) / (2.0 * step);
            jac.set_column(j, &d);
        }
        Ok(jac)
    }

    /// Sandwich covariance `D⁻¹ (Σ h̃ h̃ᵀ) D⁻ᵀ` of `ψ̂`.
    pub fn sandwich(&self, psi: &[f64]) -> Result<Sandwich> {
        let s = self.score(psi)?;
        let q = psi.len();
        let mut meat = DMatrix::zeros(q, q);
        for h in &s.residualized {
            meat += h * h.transpose();
        }
        let jac = self.jacobian(psi)?;
        let scale = meat.diagonal().iter().map(|v| v.sqrt()).fold(0.0, f64::max);
        let det = jac.determinant();
        if !(det.abs() > 1e-10 * scale.max(1.0).powi(q as i32)) {
            return Err(Error::WeakIdentification(det));
        }
        let jinv = jac.clone().try_inverse().ok_or(Error::WeakIdentification(det))?;
        let covariance = &jinv * meat * jinv.transpose();
        let n = self.records.subjects as f64;
        let h_mean: Vec<f64> = s.per_subject.iter().fold(DVector::zeros(q), |acc, h| acc + h).iter().map(|v| v / n).collect();
        let h_se: Vec<f64> = (0..q)
            .map(|a| {
                let m = h_mean[a];
                (s.per_subject.iter().map(|h| (h[a] - m).powi(2)).sum::<f64>() / (n * (n - 1.0))).sqrt()
            })
            .collect();
        Ok(Sandwich {
            se: (0..q).map(|j| covariance[(j, j)].sqrt()).collect(),
            covariance: rows(&covariance),
            derivative: rows(&(jac / n)),
            h_mean,
            h_se,
        })
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    /// `∂/∂ψ E h`.
    pub derivative: Vec<Vec<f64>>,
    /// Empirical mean of `h` at the evaluation point and its standard error.
    pub h_mean: Vec<f64>,
    pub h_se: Vec<f64>,
}

/// Box `[lo, hi]` per coordinate of `ψ`.
pub type SearchBox = Vec<(f64, f64)>;

pub fn parse_box(spec: &str) -> Result<SearchBox> {
    spec.split(',')
        .map(|part| {
            let bad = || Error::Parse { line: 0, message: format!("box must be lo:hi[,lo:hi…], got {spec:?}") };
            let (lo, hi) = part.split_once(':').ok_or_else(bad)?;
            let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
            if !(lo < hi) {
                return Err(bad());
            }
            Ok((lo, hi))
        })
        .collect()
}

fn axis(lo: f64, hi: f64, pitch: f64) -> Vec<f64> {
    let n = ((hi - lo) / pitch + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * pitch).collect()
}

fn grid_points(bounds: &SearchBox, pitch: f64) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| axis(lo, hi, pitch)).collect();
    let mut points = vec![Vec::new()];
    for ax in &axes {
        points = points.into_iter().flat_map(|p| ax.iter().map(move |&v| [p.as_slice(), &[v]].concat())).collect();
    }
    points
}

/// Confidence set by score-test inversion on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGrid {
    pub level: f64,
    pub pitch: f64,
    pub points: Vec<Vec<f64>>,
    pub p_values: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Coordinate-wise range of the accepted points.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl ConfidenceGrid {
    pub fn covers(&self, psi: &[f64]) -> bool {
        self.bounds.as_ref().is_some_and(|b| b.iter().zip(psi).all(|(&(lo, hi), &v)| lo <= v && v <= hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub psi: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub schema_version: u32,
    pub psi_hat: Vec<f64>,
    /// Every root found; more than one sets `multiple_roots`.
    pub roots: Vec<Vec<f64>>,
    pub multiple_roots: bool,
    pub alpha_at_estimate: Vec<f64>,
    pub sandwich: Sandwich,
    pub confidence: ConfidenceGrid,
    pub trace: Vec<TracePoint>,
}

/// Largest confidence grid evaluated before the pitch is widened.
const MAX_CI_POINTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    /// Pitch of the `α̂(ψ)` trace (full fits); `None` skips the trace.
    pub trace_pitch: Option<f64>,
    /// Compute the confidence grid.
    pub confidence: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { trace_pitch: Some(0.05), confidence: true }
    }
}

/// Solves `α̂(ψ) = 0` inside `bounds`.
pub fn estimate_psi(cohort: &Cohort, spec: &TreatmentModelSpec, bounds: &SearchBox, opts: EstimateOptions) -> Result<PsiEstimate> {
    let q = spec.psi_dim();
    if bounds.len() != q {
        return Err(Error::InvalidConfig(format!("search box has {} coordinates, ψ has {q}", bounds.len())));
    }
    let est = Estimator::new(cohort, spec)?;
    let roots = if q == 1 { scalar_roots(&est, bounds[0])? } else { vector_root(&est, bounds)? };
    let psi_hat = roots[0].clone();
    let alpha_at_estimate = est.alpha_hat(&psi_hat)?;
    let norm = alpha_at_estimate.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm < spec.root_tol) {
        return Err(Error::Convergence { message: format!("‖α̂(ψ̂)‖ = {norm:e} exceeds the root tolerance"), best: psi_hat });
    }
    let sandwich = est.sandwich(&psi_hat)?;

    let confidence = if opts.confidence {
        let volume: f64 = bounds.iter().map(|&(lo, hi)| (hi - lo) / spec.ci_pitch + 1.0).product();
        let pitch = if volume > MAX_CI_POINTS as f64 {
            spec.ci_pitch * (volume / MAX_CI_POINTS as f64).powf(1.0 / q as f64)
        } else {
            spec.ci_pitch
        };
        let points = grid_points(bounds, pitch);
        let p_values = points.par_iter().map(|p| est.score_test(p).map(|t| t.p_value)).collect::<Result<Vec<_>>>()?;
        let accepted: Vec<bool> = p_values.iter().map(|&p| p >= spec.level).collect();
        let mut range: Option<Vec<(f64, f64)>> = None;
        for (p, _) in points.iter().zip(&accepted).filter(|(_, &a)| a) {
            let r = range.get_or_insert_with(|| p.iter().map(|&v| (v, v)).collect());
            for (b, &v) in r.iter_mut().zip(p) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        ConfidenceGrid { level: 1.0 - spec.level, pitch, points, p_values, accepted, bounds: range }
    } else {
        ConfidenceGrid { level: 1.0 - spec.level, pitch: spec.ci_pitch, points: vec![], p_values: vec![], accepted: vec![], bounds: None }
    };

    let trace = match opts.trace_pitch {
        Some(pitch) => grid_points(bounds, pitch)
            .par_iter()
            .map(|p| Ok(TracePoint { psi: p.clone(), alpha: est.alpha_hat(p)? }))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };

    Ok(PsiEstimate {
        schema_version: ESTIMATE_SCHEMA_VERSION,
        psi_hat,
        multiple_roots: roots.len() > 1,
        roots,
        alpha_at_estimate,
        sandwich,
        confidence,
        trace,
    })
}

/// Brackets sign changes of the `α` score on a coarse grid, then bisects.
fn scalar_roots(est: &Estimator, (lo, hi): (f64, f64)) -> Result<Vec<Vec<f64>>> {
    let cells = 64;
    let xs: Vec<f64> = (0..=cells).map(|i| lo + (hi - lo) * i as f64 / cells as f64).collect();
    let us = xs.par_iter().map(|&x| Ok(est.estimating_function(&[x])?[0])).collect::<Result<Vec<f64>>>()?;
    let mut roots = Vec::new();
    for i in 0..cells {
        let (mut a, mut b) = (xs[i], xs[i + 1]);
        let (mut ua, ub) = (us[i], us[i + 1]);
        if ua == 0.0 {
            roots.push(vec![a]);
            continue;
        }
        if ua.signum() == ub.signum() || ub == 0.0 {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            let um = est.estimating_function(&[m])?[0];
            if um == 0.0 {
                a = m;
                b = m;
                break;
            }
            if um.signum() == ua.signum() {
                a = m;
                ua = um;
            } else {
                b = m;
            }
        }
        roots.push(vec![0.5 * (a + b)]);
    }
    if us[cells] == 0.0 {
        roots.push(vec![hi]);
    }
    if roots.is_empty() {
        return Err(Error::Bracket);
    }
    Ok(roots)
}

/// Coarse grid minimum of `‖Σ h‖` followed by damped Newton.
fn vector_root(est: &Estimator, bounds: &SearchBox) -> Result<Vec<Vec<f64>>> {
    let starts = grid_points(bounds, bounds.iter().map(|&(lo, hi)| (hi - lo) / 8.0).fold(f64::INFINITY, f64::min));
    let norms = starts.par_iter().map(|p| Ok(est.estimating_function(p)?.norm())).collect::<Result<Vec<f64>>>()?;
    let best = norms.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).expect("non-empty grid");
    let mut psi = starts[best].clone();
    let mut u = est.estimating_function(&psi)?;
    for _ in 0..100 {
        let alpha = est.alpha_hat(&psi)?;
        if alpha.iter().map(|a| a * a).sum::<f64>().sqrt() < est.spec.root_tol * 1e-2 {
            break;
        }
        let jac = est.jacobian(&psi)?;
        let step = jac.lu().solve(&u).ok_or_else(|| Error::WeakIdentification(0.0))?;
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = psi.iter().zip(step.iter()).map(|(p, s)| p - scale * s).collect();
            let ut = est.estimating_function(&trial)?;
            if ut.norm() < u.norm() {
                psi = trial;
                u = ut;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if psi.iter().zip(bounds).any(|(&v, &(lo, hi))| v < lo || v > hi) {
        return Err(Error::Bracket);
    }
    Ok(vec![psi])
}
