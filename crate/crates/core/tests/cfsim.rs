use snftm_core::cfsim::{simulate_counterfactual, simulate_paths, BaselineChoice, FittedWorld};
use snftm_core::gest::{estimate_psi, EstimateOptions, TreatmentModelSpec};
use snftm_core::stats::ks_distance;
use snftm_core::{Dgp, EnumeratedWorld, ShiftFeatures, TreatmentRegime};

const EXAMPLE: &str = include_str!("../../../fixtures/example_dgp.json");

fn times() -> Vec<f64> {
    (1..=20).map(|i| 0.2 * i as f64).collect()
}

fn regimes() -> Vec<TreatmentRegime> {
    vec![
        TreatmentRegime::baseline(),
        TreatmentRegime::Static { treatments: vec![1; 4] },
        TreatmentRegime::Threshold { at_least: 1, dose: 1 },
        TreatmentRegime::Static { treatments: vec![0, 1, 0, 1] },
    ]
}

#[test]
fn baseline_regime_reproduces_the_baseline_law() {
    let dgp = Dgp::from_json(EXAMPLE).unwrap();
    let world = FittedWorld::from_dgp(&dgp);
    let paths = simulate_paths(&world, &TreatmentRegime::baseline(), 50_000, 11).unwrap();
    let samples: Vec<f64> = paths.iter().map(|p| p.trajectory.event_time).collect();
    let base = &dgp.config().baseline;
    let d = ks_distance(&samples, |t| base.survival(t));
    assert!(d < 1.36 / (samples.len() as f64).sqrt(), "KS distance {d}");
}

#[test]
fn exact_world_matches_oracle_curves() {
    let dgp = Dgp::from_json(EXAMPLE).unwrap();
    let oracle = EnumeratedWorld::new(dgp.clone()).unwrap();
    let world = FittedWorld::from_dgp(&dgp);
    for g in regimes() {
        let sim = simulate_counterfactual(&world, &g, 100_000, 5, &times()).unwrap();
        let exact = oracle.counterfactual_survival_curve(&g, &times()).unwrap();
        for i in 0..exact.len() {
            let se = (exact[i] * (1.0 - exact[i]) / 100_000.0).sqrt();
            assert!((sim.curve.survival[i] - exact[i]).abs() < 4.0 * se + 1e-12, "{g:?} t={}: {} vs {}", times()[i], sim.curve.survival[i], exact[i]);
        }
        let mean = oracle.counterfactual_mean(&g);
        assert!((sim.mean - mean).abs() < 4.0 * sim.mean_se, "{g:?}: {} vs {mean}", sim.mean);
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let world = FittedWorld::from_dgp(&Dgp::from_json(EXAMPLE).unwrap());
    let g = TreatmentRegime::Threshold { at_least: 1, dose: 1 };
    let a = simulate_counterfactual(&world, &g, 20_000, 9, &times()).unwrap();
    let b = simulate_counterfactual(&world, &g, 20_000, 9, &times()).unwrap();
    let c = simulate_counterfactual(&world, &g, 20_000, 10, &times()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.mean, c.mean);
}

/// Simulate a cohort, estimate ψ and the nuisance laws from it, and check the
/// plug-in world orders regimes as the exact oracle does.
#[test]
fn pipeline_reproduces_the_oracle_ordering() {
    let dgp = Dgp::from_json(EXAMPLE).unwrap();
    let oracle = EnumeratedWorld::new(dgp.clone()).unwrap();
    let cohort = dgp.sample_cohort(20_000).unwrap();
    let spec = TreatmentModelSpec::new(ShiftFeatures::Standard);
    let bounds = vec![(-0.5, 1.5), (-1.0, 1.0), (-1.0, 1.0)];
    let opts = EstimateOptions { trace_pitch: None, confidence: false };
    let est = estimate_psi(&cohort, &spec, &bounds, opts).unwrap();
    let world = FittedWorld::estimate(&cohort, est.psi_hat.clone(), ShiftFeatures::Standard, dgp.config().prognosis_thresholds.clone(), BaselineChoice::Empirical).unwrap();

    let candidates = [TreatmentRegime::baseline(), TreatmentRegime::Static { treatments: vec![1; 4] }];
    let exact: Vec<f64> = candidates.iter().map(|g| oracle.counterfactual_mean(g)).collect();
    let sim: Vec<f64> = candidates.iter().map(|g| simulate_counterfactual(&world, g, 50_000, 2, &times()).unwrap().mean).collect();
    assert_eq!(exact[0] < exact[1], sim[0] < sim[1], "oracle {exact:?}, simulated {sim:?}");
}
