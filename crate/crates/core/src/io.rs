//! Cohort files: a long CSV with one row per subject-visit plus a terminal row
//! carrying the event time, and a JSON sidecar declaring grid and alphabets.
//!
//! ```text
//! id,k,tau_k,L1,A,T_event
//! 0,0,0,1,1,
//! 0,1,0.5,0,1,
//! 0,,,,,0.8123
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::history::{Alphabets, Code, Cohort, Trajectory};

pub const COHORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortMeta {
    pub schema_version: u32,
    pub grid: TimeGrid,
    pub covariate_names: Vec<String>,
    pub covariate_levels: Vec<Code>,
    pub treatment_levels: Code,
}

impl CohortMeta {
    pub fn for_cohort(cohort: &Cohort) -> Self {
        let m = cohort.alphabets.covariate_levels.len();
        Self {
            schema_version: COHORT_SCHEMA_VERSION,
            grid: cohort.grid.clone(),
            covariate_names: (1..=m).map(|i| format!("L{i}")).collect(),
            covariate_levels: cohort.alphabets.covariate_levels.clone(),
            treatment_levels: cohort.alphabets.treatment_levels,
        }
    }

    fn alphabets(&self) -> Result<Alphabets> {
        if self.covariate_names.len() != self.covariate_levels.len() {
            return Err(Error::InvalidConfig("covariate_names and covariate_levels differ in length".into()));
        }
        Alphabets::new(self.covariate_levels.clone(), self.treatment_levels)
    }
}

/// `dir/stem.meta.json` next to `dir/stem.csv`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_cohort_csv(cohort: &Cohort, out: impl Write) -> Result<()> {
    let meta = CohortMeta::for_cohort(cohort);
    let m = meta.covariate_names.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "k".into(), "tau_k".into()];
    header.extend(meta.covariate_names.iter().cloned());
    header.extend(["A".to_string(), "T_event".into()]);
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for (id, s) in cohort.subjects.iter().enumerate() {
        for k in 0..s.covariates.len() {
            row.clear();
            row.push(id.to_string());
            row.push(k.to_string());
            row.push(cohort.grid.tau(k).to_string());
            row.extend(cohort.alphabets.decode(s.covariates[k]).iter().map(|v| v.to_string()));
            row.push(s.treatments[k].to_string());
            row.push(String::new());
            w.write_record(&row)?;
        }
        row.clear();
        row.push(id.to_string());
        row.extend(std::iter::repeat_n(String::new(), m + 3));
        row.push(s.event_time.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_meta(cohort: &Cohort, out: impl Write) -> Result<()> {
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, &CohortMeta::for_cohort(cohort))?;
    writeln!(out)?;
    Ok(())
}

pub fn read_meta(text: &str) -> Result<CohortMeta> {
    let meta: CohortMeta = serde_json::from_str(text)?;
    if meta.schema_version != COHORT_SCHEMA_VERSION {
        return Err(Error::InvalidConfig(format!("unsupported cohort schema version {}", meta.schema_version)));
    }
    Ok(meta)
}

fn parse<T: std::str::FromStr>(field: &str, line: u64, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse { line, message: format!("cannot parse {what} from {field:?}") })
}

/// Reads a cohort CSV against its sidecar. Subjects must appear in contiguous
/// blocks, visits in order, each block closed by its terminal row.
pub fn read_cohort_csv(input: impl Read, meta: &CohortMeta) -> Result<Cohort> {
    let alphabets = meta.alphabets()?;
    let m = meta.covariate_names.len();
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let mut expected = vec!["id".to_string(), "k".into(), "tau_k".into()];
    expected.extend(meta.covariate_names.iter().cloned());
    expected.extend(["A".to_string(), "T_event".into()]);
    if header.iter().map(|h| h.trim()).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", expected.join(",")) });
    }

    let grid = &meta.grid;
    let mut subjects = Vec::new();
    let mut current: Option<String> = None;
    let (mut ls, mut as_) = (Vec::new(), Vec::new());
    let mut components = vec![0; m];
    for record in r.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].trim().to_string();
        if current.as_deref() != Some(&id) {
            if current.is_some() {
                return Err(Error::Parse { line, message: "previous subject has no terminal row".into() });
            }
            current = Some(id.clone());
        }
        let t_field = record[m + 4].trim();
        if !t_field.is_empty() {
            if (1..m + 4).any(|i| !record[i].trim().is_empty()) {
                return Err(Error::Parse { line, message: "terminal row must leave k, tau_k, covariates and A empty".into() });
            }
            let t: f64 = parse(t_field, line, "T_event")?;
            let traj = Trajectory::new(grid, std::mem::take(&mut ls), std::mem::take(&mut as_), t)
                .map_err(|e| Error::Parse { line, message: format!("subject {id}: {e}") })?;
            subjects.push(traj);
            current = None;
            continue;
        }
        let k: usize = parse(&record[1], line, "k")?;
        if k != ls.len() {
            return Err(Error::Parse { line, message: format!("subject {id}: expected visit {} but found {k}", ls.len()) });
        }
        if k > grid.horizon() {
            return Err(Error::Parse { line, message: format!("visit {k} exceeds the grid horizon") });
        }
        let tau: f64 = parse(&record[2], line, "tau_k")?;
        if tau != grid.tau(k) {
            return Err(Error::Parse { line, message: format!("tau_k = {tau} does not match grid time {}", grid.tau(k)) });
        }
        for (i, c) in components.iter_mut().enumerate() {
            *c = parse(&record[3 + i], line, &meta.covariate_names[i])?;
        }
        let l = alphabets.encode(&components).map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let a: Code = parse(&record[m + 3], line, "A")?;
        if a >= alphabets.treatment_levels {
            return Err(Error::Parse { line, message: format!("treatment {a} outside 0..{}", alphabets.treatment_levels) });
        }
        ls.push(l);
        as_.push(a);
    }
    if current.is_some() {
        return Err(Error::Parse { line: 0, message: "last subject has no terminal row".into() });
    }
    Cohort::new(grid.clone(), alphabets, subjects)
}

/// `t,survival,stderr` rows; `stderr` is left empty for exact curves.
pub fn write_curve_csv(times: &[f64], survival: &[f64], stderr: Option<&[f64]>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "survival", "stderr"])?;
    for i in 0..times.len() {
        let se = stderr.map_or(String::new(), |s| s[i].to_string());
        w.write_record([times[i].to_string(), survival[i].to_string(), se])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `a:b:step` into the times `a, a + step, …` up to `b` inclusive
/// (within rounding).
pub fn parse_time_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Parse { line: 0, message: format!("time grid must be a:b:step, got {spec:?}") };
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let [a, b, step] = parts[..] else { return Err(bad()) };
    if !(a > 0.0) || !(b >= a) || !(step > 0.0) {
        return Err(Error::Parse { line: 0, message: format!("time grid {spec:?} needs 0 < a ≤ b and step > 0") });
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}
