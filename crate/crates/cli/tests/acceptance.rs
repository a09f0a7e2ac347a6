//! Acceptance suite: one line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The exit
//! status gates on the deterministic criteria only. Criteria 6 to 9 are Monte
//! Carlo estimates on fixed seeds and miss their bands at a nominal rate even
//! when the implementation is right; their lines are reported, not gated.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use snftm_core::cfsim::{simulate_counterfactual, FittedWorld};
use snftm_core::gest::{estimate_psi, g_test, EstimateOptions, TreatmentModelSpec};
use snftm_core::mle::{fit, fit_restricted, log_density, test_null, ParametricModel};
use snftm_core::oracle::{verify_blip_theorems, verify_gcomputation, verify_null_equivalence, CheckReport, RegimeSet};
use snftm_core::stats::{mean, std_dev};
use snftm_core::streams::stream;
use snftm_core::{Dgp, EnumeratedWorld, ShiftFeatures, ShiftModel, TimeGrid, TreatmentRegime};

const BIN: &str = env!("CARGO_BIN_EXE_snftm");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn dgp(name: &str) -> Dgp {
    Dgp::from_json(&fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

fn times(n: usize, hi: f64) -> Vec<f64> {
    (1..=n).map(|i| hi * i as f64 / n as f64).collect()
}

/// Seed of replicate `r` in a study labelled `study`.
fn replicate_seed(study: u64, r: usize) -> u64 {
    study * 1_000_000 + r as u64
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn all_passed(reports: &[CheckReport]) -> (bool, f64) {
    let worst = reports.iter().map(|r| r.worst_deviation).fold(0.0, f64::max);
    (reports.iter().all(|r| r.passed), worst)
}

fn criterion_1() -> Verdict {
    let grid = TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
    let m = ShiftModel::new(grid, vec![0.5f64.ln()], ShiftFeatures::TreatmentOnly).unwrap();
    let (l, a) = ([0, 0], [0, 1]);
    let g15 = m.gamma(1, &l, &a, 1.5).unwrap();
    let g30 = m.gamma(1, &l, &a, 3.0).unwrap();
    let fixtures_exact = g15 == 1.25 && g30 == 2.5;

    // 10⁴ random configurations: grids, ψ ∈ [-1, 1]³, binary histories, times
    let mut rng = stream(1, "acceptance.shift", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let visits = rng.random_range(1..5);
        let mut taus = vec![0.0];
        for _ in 0..visits {
            taus.push(taus.last().unwrap() + rng.random_range(0.05..1.5));
        }
        let grid = TimeGrid::new(taus).unwrap();
        let psi: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = ShiftModel::new(grid.clone(), psi, ShiftFeatures::Standard).unwrap();
        let l: Vec<u32> = (0..grid.visits()).map(|_| rng.random_range(0..2)).collect();
        let a: Vec<u32> = (0..grid.visits()).map(|_| rng.random_range(0..2)).collect();
        let k = rng.random_range(0..grid.visits());
        let t = grid.tau(k) + rng.random_range(1e-6..6.0);
        let back = m.gamma_inv(k, &l, &a, m.gamma(k, &l, &a, t).unwrap()).unwrap();
        worst = worst.max((back - t).abs());
    }
    check(
        fixtures_exact && worst < 1e-14,
        format!("gamma(1.5) = {g15}, gamma(3.0) = {g30}; worst round trip {worst:e} over 10^4 configs"),
    )
}

fn criterion_2() -> Verdict {
    let world = EnumeratedWorld::new(dgp("two_period.json")).unwrap();
    let set = RegimeSet::for_world(&world, 10_000, 256, 1);
    let reports = verify_gcomputation(&world, &set, &times(20, 3.0)).unwrap();
    let core: Vec<CheckReport> = reports.into_iter().filter(|r| r.name.contains("identification")).collect();
    let (ok, worst) = all_passed(&core);
    check(ok && set.exhaustive && set.regimes.len() == 64, format!("{} regimes, marginal and conditional, worst {worst:e} (tol 1e-10)", set.regimes.len()))
}

fn criterion_3() -> Verdict {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for name in ["two_period.json", "example_dgp.json"] {
        let world = EnumeratedWorld::new(dgp(name)).unwrap();
        let psi = world.dgp().config().psi0.clone();
        let (pass, w) = all_passed(&verify_blip_theorems(&world, &psi, &times(20, 3.0)).unwrap());
        ok &= pass;
        worst = worst.max(w);
    }
    check(ok, format!("baseline law, factorization and conditional-law identities, worst {worst:e} (tol 1e-12)"))
}

fn criterion_4() -> Verdict {
    let null_two = {
        let d = dgp("two_period.json");
        d.with_psi(vec![0.0; d.config().psi0.len()]).unwrap()
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for (label, world) in [("two-period null", EnumeratedWorld::new(null_two).unwrap()), ("example null", EnumeratedWorld::new(dgp("null_dgp.json")).unwrap())] {
        let set = RegimeSet::for_world(&world, 10_000, 256, 2);
        let reports = verify_null_equivalence(&world, &set, &times(20, 3.0)).unwrap();
        let common = reports.iter().find(|r| r.name == "null_common_curve").unwrap();
        ok &= common.passed && common.applicable;
        detail.push(format!("{label}: spread {:e} over {} regimes", common.worst_deviation, set.regimes.len()));
    }
    let world = EnumeratedWorld::new(dgp("two_period.json")).unwrap();
    let set = RegimeSet::for_world(&world, 10_000, 256, 2);
    let reports = verify_null_equivalence(&world, &set, &times(20, 3.0)).unwrap();
    let witness = reports.iter().find(|r| r.name == "null_witness_pair").unwrap();
    ok &= witness.passed && witness.applicable && witness.worst_deviation > 1e-3;
    detail.push(format!("witness gap {:.4} (> 1e-3)", witness.worst_deviation));
    check(ok, detail.join("; "))
}

fn criterion_5() -> Verdict {
    let d = dgp("two_period.json");
    let world = EnumeratedWorld::new(d.clone()).unwrap();
    let model = ParametricModel::from_dgp(d.config()).unwrap();
    let cohort = d.sample_cohort(5000).unwrap();
    let mut worst: f64 = 0.0;
    let mut jacobian_exact = true;
    for s in &cohort.subjects {
        let ours = log_density(&model, d.grid(), s).unwrap().exp() * world.treatment_factor(s);
        let exact = world.joint_density(s);
        worst = worst.max((ours - exact).abs() / exact);
        let mut v = s.event_time;
        let mut log_product = 0.0;
        for m in (0..=s.last_visit()).rev() {
            log_product += d.model().gamma_deriv(m, &s.covariates, &s.treatments, v).unwrap().ln();
            v = d.model().gamma(m, &s.covariates, &s.treatments, v).unwrap();
        }
        jacobian_exact &= d.model().blip_down_with_derivatives(s).log_jacobian == log_product;
    }
    check(worst < 1e-10 && jacobian_exact, format!("worst relative density gap {worst:e} over 5000 paths; Jacobian exact: {jacobian_exact}"))
}

fn criterion_6() -> Verdict {
    let spec = TreatmentModelSpec::new(ShiftFeatures::Standard);
    let null = dgp("null_dgp.json");
    let rejections: usize = (0..1000)
        .into_par_iter()
        .map(|r| {
            let cohort = null.with_seed(replicate_seed(6, r)).sample_cohort(2000).unwrap();
            g_test(&cohort, &spec, None).unwrap().score.rejects(0.05) as usize
        })
        .sum();
    let level = rejections as f64 / 1000.0;
    let effect = dgp("example_dgp.json");
    let power_hits: usize = (0..200)
        .into_par_iter()
        .map(|r| {
            let cohort = effect.with_seed(replicate_seed(60, r)).sample_cohort(10_000).unwrap();
            g_test(&cohort, &spec, None).unwrap().score.rejects(0.05) as usize
        })
        .sum();
    let power = power_hits as f64 / 200.0;
    check(
        (0.03..=0.07).contains(&level) && power > 0.9,
        format!("level {level:.3} over 1000 reps (n=2000) in [0.03, 0.07]; power {power:.3} over 200 reps (n=10^4) > 0.9"),
    )
}

fn criterion_7() -> Verdict {
    let d = dgp("one_parameter.json");
    let psi0 = d.config().psi0[0];
    let spec = TreatmentModelSpec::new(ShiftFeatures::TreatmentOnly);
    let reps: Vec<(f64, f64, bool)> = (0..200)
        .into_par_iter()
        .map(|r| {
            let cohort = d.with_seed(replicate_seed(7, r)).sample_cohort(20_000).unwrap();
            let opts = EstimateOptions { trace_pitch: None, confidence: true };
            let est = estimate_psi(&cohort, &spec, &vec![(0.2, 1.2)], opts).unwrap();
            (est.psi_hat[0], est.sandwich.se[0], est.confidence.covers(&[psi0]))
        })
        .collect();
    let within = reps.iter().filter(|(p, se, _)| (p - psi0).abs() < 3.0 * se).count() as f64 / 200.0;
    let coverage = reps.iter().filter(|r| r.2).count() as f64 / 200.0;
    let estimates: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let ses: Vec<f64> = reps.iter().map(|r| r.1).collect();
    let ratio = mean(&ses) / std_dev(&estimates);
    check(
        within >= 0.95 && (0.90..=0.985).contains(&coverage) && (0.8..=1.25).contains(&ratio),
        format!(
            "within 3 SE {within:.3} (>= 0.95); CI coverage {coverage:.3} in [0.90, 0.985]; SE/SD {ratio:.3} in [0.8, 1.25]; mean estimate {:.4}",
            mean(&estimates)
        ),
    )
}

fn mle_level(d: &Dgp, study: u64, reps: usize, n: usize) -> (f64, usize) {
    let init = ParametricModel::from_dgp(d.config()).unwrap();
    let outcomes: Vec<Option<bool>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let cohort = d.with_seed(replicate_seed(study, r)).sample_cohort(n).unwrap();
            let fitted = fit(&cohort, &init).ok()?;
            let (restricted, info) = fit_restricted(&cohort, &init).ok()?;
            let report = test_null(&fitted, &restricted, &info).ok()?;
            Some(report.likelihood_ratio.rejects(0.05))
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    let rejections = outcomes.iter().filter(|o| **o == Some(true)).count();
    (rejections as f64 / reps as f64, failures)
}

fn criterion_8() -> Verdict {
    let d = dgp("regular_dgp.json");
    let init = ParametricModel::from_dgp(d.config()).unwrap();
    let cohort = d.sample_cohort(20_000).unwrap();
    let (recovered, detail) = match fit(&cohort, &init) {
        Ok(f) => {
            let se = f.se.clone().unwrap_or_default();
            let ok = se.len() == 3 && (0..3).all(|j| (f.model.psi[j] - d.config().psi0[j]).abs() < 3.0 * se[j]);
            (ok, format!("ψ̂ = {:.4?} ± {:.4?}", f.model.psi, se))
        }
        Err(e) => (false, format!("fit failed: {e}")),
    };
    let null = d.with_psi(vec![0.0; 3]).unwrap();
    let (level, failures) = mle_level(&null, 8, 500, 2000);
    check(
        recovered && failures == 0 && (0.03..=0.07).contains(&level),
        format!("regular dgp: {detail} (n=2·10^4, within 3 SE: {recovered}); LR level {level:.3} over 500 reps (n=2000) in [0.03, 0.07], failed fits {failures}"),
    )
}

/// Not a gate: the example dgp has a two-piece hazard and a prognosis bin,
/// which make the likelihood non-regular.
fn mle_diagnostic() -> String {
    let d = dgp("null_dgp.json");
    let (level, failures) = mle_level(&d, 80, 100, 2000);
    format!("example dgp at ψ₀ = 0: LR rejection {level:.3} over 100 reps (n=2000), failed fits {failures}")
}

fn criterion_9() -> Verdict {
    let d = dgp("example_dgp.json");
    let oracle = EnumeratedWorld::new(d.clone()).unwrap();
    let world = FittedWorld::from_dgp(&d);
    let grid = times(12, 3.0);
    let regimes = [
        TreatmentRegime::baseline(),
        TreatmentRegime::Static { treatments: vec![1; 4] },
        TreatmentRegime::Threshold { at_least: 1, dose: 1 },
    ];
    let n = 100_000;
    let mut worst_z: f64 = 0.0;
    let mut sim_means = Vec::new();
    let mut exact_means = Vec::new();
    for (i, g) in regimes.iter().enumerate() {
        let sim = simulate_counterfactual(&world, g, n, replicate_seed(9, i), &grid).unwrap();
        let exact = oracle.counterfactual_survival_curve(g, &grid).unwrap();
        for (s, e) in sim.curve.survival.iter().zip(&exact) {
            let se = (e * (1.0 - e) / n as f64).sqrt();
            worst_z = worst_z.max((s - e).abs() / se);
        }
        sim_means.push(sim.mean);
        exact_means.push(oracle.counterfactual_mean(g));
    }
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let same_order = order(&sim_means) == order(&exact_means);
    check(
        worst_z < 3.0 && same_order,
        format!("worst |Δ|/SE {worst_z:.2} (< 3) over {} regimes × {} times; means {:.4?} vs exact {:.4?}", regimes.len(), grid.len(), sim_means, exact_means),
    )
}

fn run_cli(args: &[String]) -> bool {
    Command::new(BIN).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    let f = |name: &str| fixture(name).display().to_string();
    let p = |name: &str| work.join(name).display().to_string();
    fs::write(work.join("spec1.json"), r#"{"shift_features": "treatment_only"}"#).unwrap();
    // shared inputs
    let mut ok = run_cli(&["simulate", "--dgp", &f("one_parameter.json"), "--n", "3000", "--out", &p("in.csv")].map(String::from))
        && run_cli(&["simulate", "--dgp", &f("regular_dgp.json"), "--n", "2000", "--out", &p("reg.csv")].map(String::from));

    let commands: Vec<(&str, Vec<String>, Vec<&str>)> = vec![
        ("simulate", vec!["simulate".into(), "--dgp".into(), f("example_dgp.json"), "--n".into(), "3000".into(), "--out".into(), "{}/c.csv".into()], vec!["c.csv", "c.meta.json"]),
        ("gcomp", vec!["gcomp".into(), "--laws".into(), p("in.csv"), "--regime".into(), f("regime_never.json"), "--t-grid".into(), "0.5:3:0.5".into(), "--mc".into(), "20000".into(), "--out".into(), "{}/g.csv".into()], vec!["g.csv"]),
        ("gtest", vec!["gtest".into(), "--cohort".into(), p("in.csv"), "--spec".into(), p("spec1.json"), "--psi0".into(), "0.7".into(), "--out".into(), "{}/t.json".into()], vec!["t.json"]),
        ("estimate", vec!["estimate".into(), "--cohort".into(), p("in.csv"), "--spec".into(), p("spec1.json"), "--box".into(), "0.2:1.2".into(), "--world-out".into(), "{}/w.json".into(), "--thresholds".into(), "0.8".into(), "--out".into(), "{}/e.json".into()], vec!["e.json", "w.json"]),
        ("mle", vec!["mle".into(), "--cohort".into(), p("reg.csv"), "--model".into(), f("regular_model.json"), "--out".into(), "{}/m.json".into()], vec!["m.json"]),
        ("cfsim", vec!["cfsim".into(), "--dgp".into(), f("example_dgp.json"), "--regime".into(), f("regime_threshold.json"), "--n".into(), "50000".into(), "--t-grid".into(), "0.25:3:0.25".into(), "--out".into(), "{}/cf.csv".into(), "--summary".into(), "{}/cf.json".into()], vec!["cf.csv", "cf.json"]),
        ("verify", vec!["verify".into(), "--dgp".into(), f("two_period.json"), "--suite".into(), "all".into(), "--out".into(), "{}/v.json".into()], vec!["v.json"]),
    ];
    let mut differing = Vec::new();
    for (name, template, outputs) in &commands {
        let mut contents = Vec::new();
        for (run, threads) in ["1", "1", "4"].iter().enumerate() {
            let sub = work.join(format!("{name}{run}"));
            fs::create_dir(&sub).unwrap();
            let mut args: Vec<String> = template.iter().map(|a| a.replace("{}", &sub.display().to_string())).collect();
            args.extend(["--threads".into(), threads.to_string(), "--seed".into(), "424242".into()]);
            ok &= run_cli(&args);
            contents.push(outputs.iter().map(|o| fs::read(sub.join(o)).unwrap_or_default()).collect::<Vec<_>>());
        }
        if !contents.windows(2).all(|w| w[0] == w[1]) {
            differing.push(*name);
        }
    }
    check(
        ok && differing.is_empty(),
        format!("{} commands run twice with 1 thread and once with 4; differing outputs: {differing:?}", commands.len()),
    )
}

fn main() {
    let limits = [1.0, 10.0, 10.0, 30.0, 5.0, 600.0, 1200.0, 1800.0, 120.0, f64::INFINITY];
    let criteria: [fn() -> Verdict; 10] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
    ];
    const MONTE_CARLO: [usize; 4] = [6, 7, 8, 9];
    let (mut failed, mut gating) = (0, 0);
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = c();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < limits[i];
        let passed = v.passed && in_time;
        failed += !passed as usize;
        gating += (!passed && !MONTE_CARLO.contains(&(i + 1))) as usize;
        let budget = if limits[i].is_finite() { format!(", limit {} s", limits[i]) } else { String::new() };
        println!("criterion {:>2}: {} ({:.1} s{budget}) {}", i + 1, if passed { "PASS" } else { "FAIL" }, secs, v.detail);
        if i == 7 {
            let start = Instant::now();
            let d = mle_diagnostic();
            println!("  diagnostic: {d} ({:.1} s)", start.elapsed().as_secs_f64());
        }
    }
    println!("acceptance: {} of 10 criteria passed, {gating} deterministic failures", 10 - failed);
    if gating > 0 {
        std::process::exit(1);
    }
}
