use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snftm_core::cfsim::CounterfactualSummary;
use snftm_core::{Dgp, EnumeratedWorld, TreatmentRegime};

const BIN: &str = env!("CARGO_BIN_EXE_snftm");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn snftm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_is_reproducible_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let dgp = fixture("example_dgp.json");
    let mut files = Vec::new();
    for (i, threads) in ["1", "1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("c{i}.csv"));
        let o = snftm(&["simulate", "--dgp", arg(&dgp), "--n", "500", "--threads", threads, "--out", arg(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push((fs::read(&out).unwrap(), fs::read(dir.path().join(format!("c{i}.meta.json"))).unwrap()));
    }
    assert!(files.windows(2).all(|w| w[0] == w[1]));
    let other = dir.path().join("other.csv");
    snftm(&["simulate", "--dgp", arg(&dgp), "--n", "500", "--seed", "7", "--out", arg(&other)]);
    assert_ne!(fs::read(&other).unwrap(), files[0].0);
}

#[test]
fn every_run_logs_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let o = snftm(&["simulate", "--dgp", arg(&fixture("null_dgp.json")), "--n", "10", "--out", arg(&out)]);
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["resolved"]["seed"], 20011205);
    assert_eq!(line["invocation"]["command"]["simulate"]["n"], 10);
}

#[test]
fn verify_passes_on_the_shipped_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = snftm(&["verify", "--dgp", arg(&fixture("example_dgp.json")), "--suite", "all", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["schema_version"], 1);
}

#[test]
fn usage_errors_exit_with_two() {
    let o = snftm(&["simulate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));

    let o = snftm(&["verify", "--dgp", "/no/such/file.json"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"grid\": [0, 1],\n  oops\n}").unwrap();
    let o = snftm(&["verify", "--dgp", arg(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = snftm(&["verify", "--dgp", arg(&fixture("example_dgp.json")), "--suite", "everything"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_cohort_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    let o = snftm(&["simulate", "--dgp", arg(&fixture("example_dgp.json")), "--n", "5", "--out", arg(&csv)]);
    assert!(o.status.success());
    let mut text = fs::read_to_string(&csv).unwrap();
    text = text.replacen("0,0,0,", "0,0,zero,", 1);
    fs::write(&csv, text).unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"shift_features": "standard"}"#).unwrap();
    let o = snftm(&["gtest", "--cohort", arg(&csv), "--spec", arg(&spec)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    snftm(&["simulate", "--dgp", arg(&fixture("example_dgp.json")), "--n", "40", "--out", arg(&csv)]);
    let out = dir.path().join("curve.csv");
    // a 40-subject cohort leaves cells of the always-treat regime empty
    let o = snftm(&["gcomp", "--laws", arg(&csv), "--regime", arg(&fixture("regime_always.json")), "--t-grid", "0.5:3:0.5", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("undefined cell"));
    assert!(!out.exists());
}

#[test]
fn gcomp_writes_the_exact_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let o = snftm(&["gcomp", "--dgp", arg(&fixture("two_period.json")), "--regime", arg(&fixture("regime_never.json")), "--t-grid", "0.5:2:0.5", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,survival,stderr"));
    let base = Dgp::from_json(&fs::read_to_string(fixture("two_period.json")).unwrap()).unwrap().config().baseline.clone();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let (t, s): (f64, f64) = (cols[0].parse().unwrap(), cols[1].parse().unwrap());
        assert!((s - base.survival(t)).abs() < 1e-12);
        assert_eq!(cols[2], "");
    }
    // only the output itself is left in the directory
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn pipeline_reproduces_the_oracle_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let dgp_path = fixture("example_dgp.json");
    let o = snftm(&["simulate", "--dgp", arg(&dgp_path), "--n", "20000", "--out", arg(&p("c.csv"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(p("spec.json"), r#"{"shift_features": "standard"}"#).unwrap();
    let o = snftm(&[
        "estimate", "--cohort", arg(&p("c.csv")), "--spec", arg(&p("spec.json")),
        "--box", "-0.5:1.5,-1:1,-1:1", "--trace-pitch", "0", "--no-confidence",
        "--world-out", arg(&p("world.json")), "--thresholds", "0.8", "--out", arg(&p("est.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let regimes = [("never", "regime_never.json"), ("always", "regime_always.json")];
    let mut simulated = Vec::new();
    for (name, file) in regimes {
        let o = snftm(&[
            "cfsim", "--world", arg(&p("world.json")), "--regime", arg(&fixture(file)), "--n", "50000",
            "--t-grid", "0.5:3:0.5", "--out", arg(&p(&format!("{name}.csv"))), "--summary", arg(&p(&format!("{name}.json"))),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s: CounterfactualSummary = serde_json::from_slice(&fs::read(p(&format!("{name}.json"))).unwrap()).unwrap();
        simulated.push(s.mean);
    }
    let oracle = EnumeratedWorld::new(Dgp::from_json(&fs::read_to_string(&dgp_path).unwrap()).unwrap()).unwrap();
    let exact: Vec<f64> = regimes
        .iter()
        .map(|(_, file)| {
            let g: TreatmentRegime = serde_json::from_str(&fs::read_to_string(fixture(file)).unwrap()).unwrap();
            oracle.counterfactual_mean(&g)
        })
        .collect();
    assert_eq!(exact[0] < exact[1], simulated[0] < simulated[1], "oracle {exact:?}, simulated {simulated:?}");
}
