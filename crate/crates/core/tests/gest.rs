use snftm_core::gest::{estimate_psi, g_test, EstimateOptions, Estimator, TreatmentModelSpec};
use snftm_core::{Cohort, Dgp, ShiftFeatures, ShiftModel};

const EXAMPLE: &str = include_str!("../../../fixtures/example_dgp.json");
const ONE_PARAMETER: &str = include_str!("../../../fixtures/one_parameter.json");

fn coin_flip_dgp() -> Dgp {
    let mut cfg = Dgp::from_json(EXAMPLE).unwrap().config().clone();
    cfg.treatment_law = serde_json::from_str(r#"{"type": "table", "default": [0.5, 0.5]}"#).unwrap();
    Dgp::new(cfg).unwrap()
}

/// Dense solve by Gauss–Jordan elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let factor = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

/// One-parameter score statistic written out from scratch: IRLS for the null
/// model `[1, l_k, a_{k-1}]`, then `U² / (I_cc − I_cf I_ff⁻¹ I_fc)`.
fn score_statistic_by_hand(cohort: &Cohort, c: &[f64]) -> f64 {
    let mut rows = Vec::new();
    for (i, s) in cohort.subjects.iter().enumerate() {
        for k in 0..s.covariates.len() {
            let prev = if k > 0 { s.treatments[k - 1] as f64 } else { 0.0 };
            rows.push(([1.0, s.covariates[k] as f64, prev], s.treatments[k] as f64, c[i]));
        }
    }
    let mut beta = vec![0.0; 3];
    for _ in 0..50 {
        let mut info = vec![vec![0.0; 3]; 3];
        let mut grad = vec![0.0; 3];
        for (f, y, _) in &rows {
            let p = 1.0 / (1.0 + (-(f[0] * beta[0] + f[1] * beta[1] + f[2] * beta[2])).exp());
            for a in 0..3 {
                grad[a] += (y - p) * f[a];
                for b in 0..3 {
                    info[a][b] += p * (1.0 - p) * f[a] * f[b];
                }
            }
        }
        let step = solve(info, grad);
        beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
    }
    let (mut u, mut icc) = (0.0, 0.0);
    let mut icf = vec![0.0; 3];
    let mut iff = vec![vec![0.0; 3]; 3];
    for (f, y, ci) in &rows {
        let p = 1.0 / (1.0 + (-(f[0] * beta[0] + f[1] * beta[1] + f[2] * beta[2])).exp());
        let w = p * (1.0 - p);
        u += (y - p) * ci;
        icc += w * ci * ci;
        for a in 0..3 {
            icf[a] += w * ci * f[a];
            for b in 0..3 {
                iff[a][b] += w * f[a] * f[b];
            }
        }
    }
    let proj = solve(iff, icf.clone());
    let efficient = icc - icf.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>();
    u * u / efficient
}

#[test]
fn score_statistic_matches_a_hand_computation() {
    let dgp = Dgp::from_json(ONE_PARAMETER).unwrap();
    let cohort = dgp.sample_cohort(3000).unwrap();
    let spec = TreatmentModelSpec::new(ShiftFeatures::TreatmentOnly);
    for psi in [0.3, 0.7, 1.0] {
        let model = ShiftModel::new(cohort.grid.clone(), vec![psi], ShiftFeatures::TreatmentOnly).unwrap();
        let c: Vec<f64> = cohort.subjects.iter().map(|s| model.blip_down(s, 0).clamp(0.0, 10.0)).collect();
        let hand = score_statistic_by_hand(&cohort, &c);
        let ours = g_test(&cohort, &spec, Some(&[psi])).unwrap().score.statistic;
        assert!((ours - hand).abs() < 1e-8 * hand.max(1.0), "ψ = {psi}: {ours} vs {hand}");
    }
}

#[test]
fn coin_flip_treatment_is_unrelated_to_blipped_times_at_the_truth() {
    let dgp = coin_flip_dgp();
    let cohort = dgp.sample_cohort(20_000).unwrap();
    let spec = TreatmentModelSpec::new(ShiftFeatures::Standard);
    let truth = g_test(&cohort, &spec, Some(&dgp.config().psi0)).unwrap();
    for (a, se) in truth.alpha.iter().zip(&truth.alpha_se) {
        assert!(a.abs() < 4.0 * se, "α = {a} ± {se}");
    }
    // a fair coin: intercept and slopes of the null fit near zero
    assert!(truth.theta_null.iter().all(|t| t.abs() < 0.1), "{:?}", truth.theta_null);
    let wrong = g_test(&cohort, &spec, Some(&[0.0, 0.0, 0.0])).unwrap();
    assert!(wrong.score.p_value < 1e-6, "wrong ψ not detected: {:?}", wrong.score);
}

#[test]
fn g_null_test_uses_observed_times() {
    let cohort = Dgp::from_json(EXAMPLE).unwrap().sample_cohort(2000).unwrap();
    let spec = TreatmentModelSpec::new(ShiftFeatures::Standard);
    let null = g_test(&cohort, &spec, None).unwrap();
    assert!(null.psi.is_none());
    let at_zero = g_test(&cohort, &spec, Some(&[0.0; 3])).unwrap();
    assert_eq!(null.score, at_zero.score);
    assert_eq!(null.alpha, at_zero.alpha);
}

#[test]
fn estimating_function_is_centered_at_the_truth() {
    let dgp = Dgp::from_json(EXAMPLE).unwrap();
    let cohort = dgp.sample_cohort(20_000).unwrap();
    let spec = TreatmentModelSpec::new(ShiftFeatures::Standard);
    let est = Estimator::new(&cohort, &spec).unwrap();
    let sw = est.sandwich(&dgp.config().psi0).unwrap();
    for (m, se) in sw.h_mean.iter().zip(&sw.h_se) {
        assert!(m.abs() < 4.0 * se, "mean {m} ± {se}");
    }
}

#[test]
fn one_parameter_estimate_covers_the_truth() {
    let dgp = Dgp::from_json(ONE_PARAMETER).unwrap();
    let cohort = dgp.sample_cohort(20_000).unwrap();
    let spec = TreatmentModelSpec::new(ShiftFeatures::TreatmentOnly);
    let est = estimate_psi(&cohort, &spec, &vec![(0.2, 1.2)], EstimateOptions::default()).unwrap();
    let psi0 = dgp.config().psi0[0];
    assert!((est.psi_hat[0] - psi0).abs() < 3.0 * est.sandwich.se[0], "{} ± {}", est.psi_hat[0], est.sandwich.se[0]);
    assert!(est.confidence.covers(&[psi0]));
    assert!(est.alpha_at_estimate[0].abs() < spec.root_tol);
    assert!(!est.multiple_roots);
}
