//! Newton–Raphson maximum likelihood for binary and multinomial logistic
//! regression on dense row-major designs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
/// Linear predictors beyond this size signal (quasi-)separation.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    /// Fisher information `Σ p(1−p) x xᵀ` at the estimate.
    pub information: DMatrix<f64>,
    pub loglik: f64,
    pub score_norm: f64,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        invert_spd(&self.information)
    }
}

fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient("information matrix is not positive definite".into()))
}

/// Score, Fisher information and log-likelihood of a binary logistic model at `beta`.
pub fn binary_score(x: &[f64], dim: usize, y: &[f64], beta: &[f64]) -> (DVector<f64>, DMatrix<f64>, f64) {
    let mut score = DVector::zeros(dim);
    let mut info = DMatrix::zeros(dim, dim);
    let mut loglik = 0.0;
    for (row, &yi) in x.chunks_exact(dim).zip(y) {
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let p = sigmoid(eta);
        loglik += yi * eta - log1pexp(eta);
        let w = p * (1.0 - p);
        let r = yi - p;
        for i in 0..dim {
            score[i] += r * row[i];
            let wi = w * row[i];
            for j in 0..=i {
                info[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            info[(j, i)] = info[(i, j)];
        }
    }
    (score, info, loglik)
}

fn binary_loglik(x: &[f64], dim: usize, y: &[f64], beta: &[f64]) -> f64 {
    x.chunks_exact(dim)
        .zip(y)
        .map(|(row, &yi)| {
            let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            yi * eta - log1pexp(eta)
        })
        .sum()
}

/// Maximum likelihood for `P(y = 1 | x) = σ(βᵀx)`; converged when the score
/// norm falls below `tol`.
pub fn fit_binary(x: &[f64], dim: usize, y: &[f64], tol: f64) -> Result<LogisticFit> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyCohort);
    }
    let mut beta = vec![0.0; dim];
    let (mut score, mut info, mut loglik) = binary_score(x, dim, y, &beta);
    for iter in 0..MAX_ITER {
        let norm = score.norm();
        if norm < tol {
            return Ok(LogisticFit { coef: beta, information: info, loglik, score_norm: norm, iterations: iter });
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("treatment design matrix is rank deficient".into()))?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let ll = binary_loglik(x, dim, y, &trial);
            if ll >= loglik - 1e-12 * loglik.abs().max(1.0) {
                beta = trial;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let max_eta = x
            .chunks_exact(dim)
            .map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max);
        if max_eta > SEPARATION_ETA {
            return Err(Error::Divergence(format!(
                "linear predictor reached {max_eta:.1}: outcomes are (quasi-)separated by the features, coefficients {beta:?}"
            )));
        }
        (score, info, loglik) = binary_score(x, dim, y, &beta);
        if !accepted || step.norm() * scale < 1e-15 * (1.0 + beta.iter().map(|b| b * b).sum::<f64>().sqrt()) {
            // numerical floor: the score cannot shrink further in floating point
            let norm = score.norm();
            if norm < tol.max(1e-9 * n as f64) {
                return Ok(LogisticFit { coef: beta, information: info, loglik, score_norm: norm, iterations: iter + 1 });
            }
            if !accepted {
                break;
            }
        }
    }
    Err(Error::Convergence { message: format!("logistic Newton iterations stalled with score norm {:e}", score.norm()), best: beta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    /// One row per non-reference level.
    pub coef: Vec<Vec<f64>>,
    pub information: DMatrix<f64>,
    pub loglik: f64,
    pub score_norm: f64,
}

/// Log-probabilities of all levels (reference level 0) at features `x`.
pub fn multinomial_log_probs(coef: &[Vec<f64>], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.push(0.0);
    for row in coef {
        out.push(row.iter().zip(x).map(|(b, v)| b * v).sum());
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in out.iter_mut() {
        *v -= lse;
    }
}

/// Score, information and log-likelihood of the multinomial logit; parameters
/// are flattened level-major (`coef[j][i]` at `j·dim + i`).
pub fn multinomial_score(x: &[f64], dim: usize, y: &[u32], levels: usize, coef: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>, f64) {
    let q = (levels - 1) * dim;
    let mut score = DVector::zeros(q);
    let mut info = DMatrix::zeros(q, q);
    let mut loglik = 0.0;
    let mut lp = Vec::with_capacity(levels);
    for (row, &yi) in x.chunks_exact(dim).zip(y) {
        multinomial_log_probs(coef, row, &mut lp);
        loglik += lp[yi as usize];
        for j in 1..levels {
            let pj = lp[j].exp();
            let r = if yi as usize == j { 1.0 } else { 0.0 } - pj;
            for i in 0..dim {
                score[(j - 1) * dim + i] += r * row[i];
            }
            for m in 1..levels {
                let pm = lp[m].exp();
                let w = if j == m { pj * (1.0 - pj) } else { -pj * pm };
                for i in 0..dim {
                    for h in 0..dim {
                        info[((j - 1) * dim + i, (m - 1) * dim + h)] += w * row[i] * row[h];
                    }
                }
            }
        }
    }
    (score, info, loglik)
}

pub fn fit_multinomial(x: &[f64], dim: usize, y: &[u32], levels: usize, tol: f64) -> Result<MultinomialFit> {
    if y.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut coef = vec![vec![0.0; dim]; levels - 1];
    let (mut score, mut info, mut loglik) = multinomial_score(x, dim, y, levels, &coef);
    for _ in 0..MAX_ITER {
        let norm = score.norm();
        if norm < tol {
            return Ok(MultinomialFit { coef, information: info, loglik, score_norm: norm });
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("covariate model design is rank deficient".into()))?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let trial: Vec<Vec<f64>> = coef
                .iter()
                .enumerate()
                .map(|(j, row)| row.iter().enumerate().map(|(i, b)| b + scale * step[j * dim + i]).collect())
                .collect();
            let (s, inf, ll) = multinomial_score(x, dim, y, levels, &trial);
            if ll >= loglik - 1e-12 * loglik.abs().max(1.0) {
                next = Some((trial, s, inf, ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((c, s, inf, ll)) = next else { break };
        if c.iter().flatten().any(|b| b.abs() > 50.0) {
            return Err(Error::Divergence("covariate model coefficients diverge: a level is separated".into()));
        }
        let stalled = step.norm() * scale < 1e-15;
        coef = c;
        score = s;
        info = inf;
        loglik = ll;
        if stalled && score.norm() < tol.max(1e-9 * y.len() as f64) {
            return Ok(MultinomialFit { coef, information: info, loglik, score_norm: score.norm() });
        }
    }
    Err(Error::Convergence { message: format!("multinomial Newton stalled with score norm {:e}", score.norm()), best: coef.concat() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_binary_fit_matches_frequencies() {
        // one binary feature: the MLE reproduces the two group log-odds
        let x = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let fit = fit_binary(&x, 2, &y, 1e-12).unwrap();
        let p0: f64 = 1.0 / 3.0;
        let p1: f64 = 3.0 / 4.0;
        assert!((fit.coef[0] - (p0 / (1.0 - p0)).ln()).abs() < 1e-10);
        assert!((fit.coef[0] + fit.coef[1] - (p1 / (1.0 - p1)).ln()).abs() < 1e-10);
    }

    #[test]
    fn separation_is_detected() {
        let x = [1.0, -1.0, 1.0, -2.0, 1.0, 1.0, 1.0, 2.0];
        let y = [0.0, 0.0, 1.0, 1.0];
        assert!(matches!(fit_binary(&x, 2, &y, 1e-10), Err(Error::Divergence(_))));
    }

    #[test]
    fn rank_deficiency_is_detected() {
        let x = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y = [0.0, 1.0, 1.0];
        assert!(matches!(fit_binary(&x, 2, &y, 1e-10), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn multinomial_intercepts_match_frequencies() {
        let y = [0u32, 1, 1, 2, 2, 2];
        let x = [1.0; 6];
        let fit = fit_multinomial(&x, 1, &y, 3, 1e-12).unwrap();
        assert!((fit.coef[0][0] - (2.0f64).ln()).abs() < 1e-10);
        assert!((fit.coef[1][0] - (3.0f64).ln()).abs() < 1e-10);
        let mut lp = Vec::new();
        multinomial_log_probs(&fit.coef, &[1.0], &mut lp);
        assert!((lp[2].exp() - 0.5).abs() < 1e-10);
    }
}
