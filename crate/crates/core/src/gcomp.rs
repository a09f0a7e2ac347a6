//! G-computation: the backward recursion for `s_{l̄_k,g}` and `s_g`, and its
//! Monte-Carlo counterpart.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::Code;
use crate::laws::ConditionalLaws;
use crate::regime::TreatmentRegime;
use crate::streams::{categorical, open01, stream};

/// `s_{l̄_k,g}(t)`: survival past `t` under `g`, given covariate history `l̄_k`
/// observed while following `g` and alive at `τ_k`.
pub fn s_conditional(laws: &ConditionalLaws, g: &TreatmentRegime, covariates: &[Code], t: f64) -> Result<f64> {
    Ok(s_conditional_curve(laws, g, covariates, &[t])?[0])
}

/// `s_conditional` at several times, sharing one pass over the history tree.
pub fn s_conditional_curve(laws: &ConditionalLaws, g: &TreatmentRegime, covariates: &[Code], times: &[f64]) -> Result<Vec<f64>> {
    if covariates.is_empty() {
        return Err(Error::InvalidConfig("s_conditional needs l̄_k with k ≥ 0".into()));
    }
    let k = covariates.len() - 1;
    let grid = laws.grid();
    grid.check_index(k)?;
    for &t in times {
        if !(t > grid.tau(k)) {
            return Err(Error::Domain { value: t, lower: grid.tau(k) });
        }
    }
    let treatments = g.apply(grid, covariates)?;
    let mut l = covariates.to_vec();
    let mut a = treatments[..k].to_vec();
    let mut out = vec![0.0; times.len()];
    recurse(laws, g, &mut l, &mut a, times, &mut out)?;
    Ok(out)
}

fn recurse(laws: &ConditionalLaws, g: &TreatmentRegime, l: &mut Vec<Code>, a: &mut Vec<Code>, times: &[f64], out: &mut [f64]) -> Result<()> {
    let k = l.len() - 1;
    a.push(g.dose(l));
    let curve = laws.interval(l, a)?;
    let up = laws.grid().upper(k);
    let mut later = Vec::new();
    let mut later_idx = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        if t <= up {
            out[i] = curve.eval(t);
        } else {
            later.push(t);
            later_idx.push(i);
        }
    }
    if !later.is_empty() {
        let survive = curve.eval(up);
        let mut acc = vec![0.0; later.len()];
        if survive > 0.0 {
            let probs = laws.transition(l, a)?.to_vec();
            let mut child = vec![0.0; later.len()];
            for (next, &p) in probs.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                l.push(next as Code);
                recurse(laws, g, l, a, &later, &mut child)?;
                l.pop();
                for (s, c) in acc.iter_mut().zip(&child) {
                    *s += p * c;
                }
            }
        }
        for (j, &i) in later_idx.iter().enumerate() {
            out[i] = survive * acc[j];
        }
    }
    a.pop();
    Ok(())
}

/// `s_g(t) = Σ_{l_0} P(L_0 = l_0) s_{l_0,g}(t)`.
pub fn s_marginal(laws: &ConditionalLaws, g: &TreatmentRegime, t: f64) -> Result<f64> {
    Ok(s_marginal_curve(laws, g, &[t])?[0])
}

pub fn s_marginal_curve(laws: &ConditionalLaws, g: &TreatmentRegime, times: &[f64]) -> Result<Vec<f64>> {
    let initial = laws.transition(&[], &[])?.to_vec();
    let mut total = vec![0.0; times.len()];
    for (l0, &p) in initial.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let part = s_conditional_curve(laws, g, &[l0 as Code], times)?;
        for (s, v) in total.iter_mut().zip(part) {
            *s += p * v;
        }
    }
    Ok(total)
}

/// A survival curve estimated on a time grid, with binomial standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub stderr: Vec<f64>,
    pub draws: usize,
}

impl EstimatedCurve {
    /// Empirical survivor fractions of `samples` at `times`.
    pub fn from_samples(samples: &[f64], times: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut survival = Vec::with_capacity(times.len());
        let mut stderr = Vec::with_capacity(times.len());
        for &t in times {
            let alive = sorted.len() - sorted.partition_point(|&x| x <= t);
            let p = alive as f64 / n;
            survival.push(p);
            stderr.push((p * (1.0 - p) / n).sqrt());
        }
        Self { times: times.to_vec(), survival, stderr, draws: samples.len() }
    }
}

/// Monte-Carlo G-computation: simulate `(L, T)` forward under `g` from the
/// conditional laws and report survivor fractions.
pub fn mc_gcomp(laws: &ConditionalLaws, g: &TreatmentRegime, times: &[f64], n_sim: usize, seed: u64) -> Result<EstimatedCurve> {
    if n_sim == 0 {
        return Err(Error::InvalidConfig("n_sim must be at least 1".into()));
    }
    let samples = (0..n_sim as u64)
        .into_par_iter()
        .map(|j| simulate_once(laws, g, seed, j))
        .collect::<Result<Vec<f64>>>()?;
    Ok(EstimatedCurve::from_samples(&samples, times))
}

fn simulate_once(laws: &ConditionalLaws, g: &TreatmentRegime, seed: u64, replicate: u64) -> Result<f64> {
    let mut rng = stream(seed, "gcomp.replicate", replicate);
    let grid = laws.grid();
    let mut l: Vec<Code> = Vec::with_capacity(grid.visits());
    let mut a: Vec<Code> = Vec::with_capacity(grid.visits());
    for k in 0..=grid.horizon() {
        let probs = laws.transition(&l, &a)?;
        l.push(categorical(probs, open01(&mut rng)) as Code);
        a.push(g.dose(&l));
        let curve = laws.interval(&l, &a)?;
        let u = open01(&mut rng);
        if k == grid.horizon() || u >= curve.eval(grid.upper(k)) {
            return Ok(curve.quantile(u));
        }
    }
    unreachable!("the last interval always settles")
}
