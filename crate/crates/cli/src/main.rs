use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use snftm_core::cfsim::{simulate_counterfactual, BaselineChoice, FittedWorld};
use snftm_core::gcomp::{mc_gcomp, s_marginal_curve};
use snftm_core::gest::{estimate_psi, g_test, parse_box, EstimateOptions, TreatmentModelSpec};
use snftm_core::io::{meta_path, parse_time_grid, read_cohort_csv, read_meta, write_cohort_csv, write_curve_csv, write_meta};
use snftm_core::mle::{self, ParametricModel};
use snftm_core::oracle::{run_suite, Suite, SuiteOptions};
use snftm_core::streams::DEFAULT_SEED;
use snftm_core::{estimate_laws, Cohort, ConditionalLaws, Dgp, EnumeratedWorld, TreatmentRegime};

#[derive(Parser, Serialize)]
#[command(name = "snftm", version, about = "Structural nested failure time models: simulate, estimate, verify")]
struct Cli {
    /// Master seed for every random stream (default: the dgp's seed for
    /// `simulate`, 20011205 elsewhere).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Numerical tolerance: root tolerance for `estimate`/`gtest`, gradient
    /// tolerance for `mle`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Output file (JSON commands print to stdout without it).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Draw a cohort from a data-generating process.
    Simulate(SimulateArgs),
    /// G-computation of a regime's survival curve.
    Gcomp(GcompArgs),
    /// Test α = 0 in the treatment model at a given ψ (the G-null test without --psi0).
    Gtest(GtestArgs),
    /// G-estimation of ψ with sandwich standard errors and a test-inversion confidence set.
    Estimate(EstimateArgs),
    /// Parametric maximum likelihood for ψ with Wald, score and LR tests of ψ = 0.
    Mle(MleArgs),
    /// Counterfactual simulation under a regime from a fitted or exact world.
    Cfsim(CfsimArgs),
    /// Check the identification identities on an exactly enumerated dgp.
    Verify(VerifyArgs),
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    dgp: PathBuf,
    #[arg(long)]
    n: usize,
}

#[derive(Args, Serialize)]
struct GcompArgs {
    /// Conditional laws as JSON, or a cohort CSV to estimate them from.
    #[arg(long, conflicts_with = "dgp", required_unless_present = "dgp")]
    laws: Option<PathBuf>,
    /// Use the exact laws of this dgp.
    #[arg(long)]
    dgp: Option<PathBuf>,
    #[arg(long)]
    regime: PathBuf,
    /// Evaluation times as a:b:step.
    #[arg(long = "t-grid")]
    t_grid: String,
    /// Monte-Carlo G-computation with this many draws instead of the exact recursion.
    #[arg(long)]
    mc: Option<usize>,
}

#[derive(Args, Serialize)]
struct GtestArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// Comma-separated ψ at which to blip down; omitted for the G-null test.
    #[arg(long, allow_hyphen_values = true)]
    psi0: Option<String>,
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// Search box lo:hi[,lo:hi,...], one range per component of ψ.
    #[arg(long = "box", allow_hyphen_values = true)]
    search_box: String,
    /// Pitch of the α̂(ψ) trace; 0 disables it.
    #[arg(long, default_value_t = 0.05)]
    trace_pitch: f64,
    /// Skip the confidence grid.
    #[arg(long)]
    no_confidence: bool,
    /// Also write a fitted world for `cfsim`.
    #[arg(long)]
    world_out: Option<PathBuf>,
    /// Comma-separated cut points binning blipped times in the world's covariate model.
    #[arg(long)]
    thresholds: Option<String>,
    /// Comma-separated breakpoints of a piecewise-exponential baseline (starting at 0);
    /// the empirical law of blipped times otherwise.
    #[arg(long)]
    baseline_breaks: Option<String>,
}

#[derive(Args, Serialize)]
struct MleArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Serialize)]
struct CfsimArgs {
    #[arg(long, conflicts_with = "dgp", required_unless_present = "dgp")]
    world: Option<PathBuf>,
    /// Simulate from the exact world of this dgp with ψ̂ = ψ₀.
    #[arg(long)]
    dgp: Option<PathBuf>,
    #[arg(long)]
    regime: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long = "t-grid")]
    t_grid: String,
    /// Also write the mean and curve as JSON here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    dgp: PathBuf,
    #[arg(long, default_value = "all")]
    suite: String,
    /// Check times as a:b:step (default: 20 points up to twice the last visit).
    #[arg(long = "t-grid")]
    t_grid: Option<String>,
}

enum Failure {
    /// Bad invocation or malformed input; exit 2.
    Usage(String),
    /// The computation itself failed; exit 1.
    Domain(String),
}

impl From<snftm_core::Error> for Failure {
    fn from(e: snftm_core::Error) -> Self {
        if e.is_input_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Domain(e.to_string())
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn usage<E: std::fmt::Display>(context: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Usage(format!("{}: {e}", context.display()))
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(usage(path))
}

/// Loading errors of any kind are input errors.
fn load<T>(path: &Path, parse: impl FnOnce(&str) -> snftm_core::Result<T>) -> Outcome<T> {
    parse(&read_text(path)?).map_err(usage(path))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    load(path, |text| Ok(serde_json::from_str(text)?))
}

fn load_cohort(path: &Path) -> Outcome<Cohort> {
    let meta = load(&meta_path(path), read_meta)?;
    let file = fs::File::open(path).map_err(usage(path))?;
    read_cohort_csv(io::BufReader::new(file), &meta).map_err(usage(path))
}

fn parse_list(text: &str, what: &str) -> Outcome<Vec<f64>> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("{what}: cannot parse {v:?} as a number"))))
        .collect()
}

fn time_grid(text: &str) -> Outcome<Vec<f64>> {
    parse_time_grid(text).map_err(|e| Failure::Usage(format!("--t-grid: {e}")))
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> snftm_core::Result<()>) -> Outcome<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(usage(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush().map_err(|e| Failure::Domain(e.to_string()))?;
    }
    tmp.persist(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Outcome<()> {
    let body = |w: &mut dyn Write| -> snftm_core::Result<()> {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    };
    match out {
        Some(path) => write_atomic(path, body),
        None => body(&mut io::stdout().lock()).map_err(Failure::from),
    }
}

fn require_out(cli: &Cli) -> Outcome<&Path> {
    cli.out.as_deref().ok_or_else(|| Failure::Usage("this command needs --out".into()))
}

/// Inputs must exist and output directories must be writable targets before
/// any work starts.
fn validate_paths(cli: &Cli) -> Outcome<()> {
    let mut inputs: Vec<&Path> = Vec::new();
    let mut outputs: Vec<&Path> = cli.out.iter().map(PathBuf::as_path).collect();
    match &cli.command {
        Command::Simulate(a) => inputs.push(&a.dgp),
        Command::Gcomp(a) => {
            inputs.extend(a.laws.as_deref());
            inputs.extend(a.dgp.as_deref());
            inputs.push(&a.regime);
        }
        Command::Gtest(a) => inputs.extend([a.cohort.as_path(), &a.spec]),
        Command::Estimate(a) => {
            inputs.extend([a.cohort.as_path(), &a.spec]);
            outputs.extend(a.world_out.as_deref());
        }
        Command::Mle(a) => inputs.extend([a.cohort.as_path(), &a.model]),
        Command::Cfsim(a) => {
            inputs.extend(a.world.as_deref());
            inputs.extend(a.dgp.as_deref());
            inputs.push(&a.regime);
            outputs.extend(a.summary.as_deref());
        }
        Command::Verify(a) => inputs.push(&a.dgp),
    }
    for p in inputs {
        if !p.is_file() {
            return Err(Failure::Usage(format!("{}: no such file", p.display())));
        }
    }
    for p in outputs {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return Err(Failure::Usage(format!("{}: directory does not exist", dir.display())));
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome<()> {
    validate_paths(cli)?;
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    match &cli.command {
        Command::Simulate(a) => {
            let out = require_out(cli)?;
            let mut dgp = load(&a.dgp, Dgp::from_json)?;
            if let Some(s) = cli.seed {
                dgp = dgp.with_seed(s);
            }
            log(cli, json!({"seed": dgp.config().seed}));
            let cohort = dgp.sample_cohort(a.n)?;
            write_atomic(&meta_path(out), |w| write_meta(&cohort, w))?;
            write_atomic(out, |w| write_cohort_csv(&cohort, w))
        }
        Command::Gcomp(a) => {
            let out = require_out(cli)?;
            let regime: TreatmentRegime = load_json(&a.regime)?;
            let times = time_grid(&a.t_grid)?;
            let laws = match (&a.laws, &a.dgp) {
                (_, Some(d)) => EnumeratedWorld::new(load(d, Dgp::from_json)?)?.conditional_laws()?,
                (Some(p), None) if p.extension().is_some_and(|e| e == "csv") => estimate_laws(&load_cohort(p)?)?,
                (Some(p), None) => load_json::<ConditionalLaws>(p)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            log(cli, json!({"seed": a.mc.map(|_| seed)}));
            match a.mc {
                Some(n) => {
                    let curve = mc_gcomp(&laws, &regime, &times, n, seed)?;
                    write_atomic(out, |w| write_curve_csv(&curve.times, &curve.survival, Some(&curve.stderr), w))
                }
                None => {
                    let s = s_marginal_curve(&laws, &regime, &times)?;
                    write_atomic(out, |w| write_curve_csv(&times, &s, None, w))
                }
            }
        }
        Command::Gtest(a) => {
            let mut spec: TreatmentModelSpec = load_json(&a.spec)?;
            if let Some(t) = cli.tol {
                spec.root_tol = t;
            }
            let psi = a.psi0.as_deref().map(|p| parse_list(p, "--psi0")).transpose()?;
            let cohort = load_cohort(&a.cohort)?;
            log(cli, json!({"spec": spec}));
            let report = g_test(&cohort, &spec, psi.as_deref())?;
            emit_json(cli.out.as_deref(), &report)
        }
        Command::Estimate(a) => {
            let mut spec: TreatmentModelSpec = load_json(&a.spec)?;
            if let Some(t) = cli.tol {
                spec.root_tol = t;
            }
            let bounds = parse_box(&a.search_box).map_err(|e| Failure::Usage(format!("--box: {e}")))?;
            let thresholds = a.thresholds.as_deref().map(|t| parse_list(t, "--thresholds")).transpose()?.unwrap_or_default();
            let baseline = match a.baseline_breaks.as_deref() {
                Some(b) => BaselineChoice::PiecewiseExponential { breaks: parse_list(b, "--baseline-breaks")? },
                None => BaselineChoice::Empirical,
            };
            let cohort = load_cohort(&a.cohort)?;
            log(cli, json!({"spec": spec}));
            let opts = EstimateOptions { trace_pitch: (a.trace_pitch > 0.0).then_some(a.trace_pitch), confidence: !a.no_confidence };
            let est = estimate_psi(&cohort, &spec, &bounds, opts)?;
            if let Some(path) = &a.world_out {
                let world = FittedWorld::estimate(&cohort, est.psi_hat.clone(), spec.shift_features, thresholds, baseline)?;
                emit_json(Some(path), &world)?;
            }
            emit_json(cli.out.as_deref(), &est)
        }
        Command::Mle(a) => {
            let model: ParametricModel = load_json(&a.model)?;
            let cohort = load_cohort(&a.cohort)?;
            let tol = cli.tol.unwrap_or(mle::GRADIENT_TOL);
            log(cli, json!({"gradient_tol": tol}));
            let fitted = mle::fit_with_tolerance(&cohort, &model, tol)?;
            let (restricted, info) = mle::fit_restricted(&cohort, &model)?;
            let (null_test, null_test_error) = match mle::test_null(&fitted, &restricted, &info) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let output = json!({
                "schema_version": mle::MLE_SCHEMA_VERSION,
                "fit": fitted,
                "null_test": null_test,
                "null_test_error": null_test_error,
            });
            emit_json(cli.out.as_deref(), &output)
        }
        Command::Cfsim(a) => {
            let out = require_out(cli)?;
            let world = match (&a.world, &a.dgp) {
                (_, Some(d)) => FittedWorld::from_dgp(&load(d, Dgp::from_json)?),
                (Some(w), None) => load(w, FittedWorld::from_json)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let regime: TreatmentRegime = load_json(&a.regime)?;
            let times = time_grid(&a.t_grid)?;
            log(cli, json!({"seed": seed}));
            let result = simulate_counterfactual(&world, &regime, a.n, seed, &times)?;
            write_atomic(out, |w| write_curve_csv(&result.curve.times, &result.curve.survival, Some(&result.curve.stderr), w))?;
            if let Some(path) = &a.summary {
                emit_json(Some(path), &result)?;
            }
            Ok(())
        }
        Command::Verify(a) => {
            let suite: Suite = a.suite.parse().map_err(Failure::Usage)?;
            let world = EnumeratedWorld::new(load(&a.dgp, Dgp::from_json)?)?;
            let mut opts = SuiteOptions::for_world(&world, seed);
            if let Some(t) = &a.t_grid {
                opts.times = time_grid(t)?;
            }
            log(cli, json!({"seed": seed, "times": opts.times}));
            let report = run_suite(&world, suite, &opts)?;
            emit_json(cli.out.as_deref(), &report)?;
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                Err(Failure::Domain(format!("checks failed: {}", failed.join(", "))))
            }
        }
    }
}

/// One JSON line on stderr with the invocation and the resolved settings.
fn log(cli: &Cli, resolved: serde_json::Value) {
    let line = json!({"invocation": cli, "resolved": resolved});
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
