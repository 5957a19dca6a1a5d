//! Output files: atomic writes, audit reports and run summaries.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mtrl_core::engine::{format_float, sample_complexity, RoundRecord};
use serde::Serialize;

/// Writes `path` by filling a temporary file in the same directory and renaming it.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush()?;
    }
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
}

/// One checked inequality `lhs relation rhs`, passing within `slack`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub check: String,
    pub instance: String,
    pub lhs: f64,
    pub relation: Relation,
    pub rhs: f64,
    /// Positive when the inequality holds strictly.
    pub margin: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Check {
    pub fn at_least(check: &str, instance: &str, lhs: f64, rhs: f64, slack: f64) -> Self {
        let margin = lhs - rhs;
        Self::new(check, instance, lhs, Relation::AtLeast, rhs, margin, slack)
    }

    pub fn at_most(check: &str, instance: &str, lhs: f64, rhs: f64, slack: f64) -> Self {
        let margin = rhs - lhs;
        Self::new(check, instance, lhs, Relation::AtMost, rhs, margin, slack)
    }

    fn new(check: &str, instance: &str, lhs: f64, relation: Relation, rhs: f64, margin: f64, slack: f64) -> Self {
        let pass = match relation {
            Relation::AtLeast => lhs >= rhs - slack,
            Relation::AtMost => lhs <= rhs + slack,
        };
        Self {
            check: check.into(),
            instance: instance.into(),
            lhs,
            relation,
            rhs,
            margin,
            pass,
            note: String::new(),
        }
    }

    /// A check that could not be evaluated; always fails.
    pub fn failed(check: &str, instance: &str, note: String) -> Self {
        Self {
            check: check.into(),
            instance: instance.into(),
            lhs: f64::NAN,
            relation: Relation::AtLeast,
            rhs: f64::NAN,
            margin: f64::NAN,
            pass: false,
            note,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// CSV with header `check,instance,lhs,relation,rhs,margin,pass,note`.
pub fn write_report_csv(path: &Path, checks: &[Check]) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["check", "instance", "lhs", "relation", "rhs", "margin", "pass", "note"])?;
        for c in checks {
            let rel = match c.relation {
                Relation::AtLeast => ">=",
                Relation::AtMost => "<=",
            };
            out.write_record([
                c.check.as_str(),
                c.instance.as_str(),
                &format_float(c.lhs),
                rel,
                &format_float(c.rhs),
                &format_float(c.margin),
                if c.pass { "true" } else { "false" },
                c.note.as_str(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub file: String,
    pub rounds_run: usize,
    /// First logged round with every task β-optimal; `null` if never reached.
    pub sample_complexity: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub kind: String,
    pub num_tasks: usize,
    pub rounds: usize,
    pub beta: f64,
    pub runs: Vec<SeedSummary>,
    /// Median over seeds, counting failures as infinite; `null` when the median is infinite.
    pub median_sample_complexity: Option<f64>,
    pub success_fraction: f64,
}

/// Median with `None` treated as +∞; `None` if the median itself is infinite.
pub fn median_complexity(values: &[Option<usize>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.map_or(f64::INFINITY, |r| r as f64)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

/// Builds the run summary from per-seed records.
pub fn summarize_runs(
    kind: &str,
    num_tasks: usize,
    rounds: usize,
    beta: f64,
    runs: &[(u64, String, usize, Vec<RoundRecord>)],
) -> RunSummary {
    let seeds: Vec<SeedSummary> = runs
        .iter()
        .map(|(seed, file, rounds_run, records)| SeedSummary {
            seed: *seed,
            file: file.clone(),
            rounds_run: *rounds_run,
            sample_complexity: sample_complexity(records, beta),
        })
        .collect();
    let complexities: Vec<Option<usize>> = seeds.iter().map(|s| s.sample_complexity).collect();
    let successes = complexities.iter().filter(|c| c.is_some()).count();
    RunSummary {
        kind: kind.into(),
        num_tasks,
        rounds,
        beta,
        median_sample_complexity: median_complexity(&complexities),
        success_fraction: successes as f64 / seeds.len().max(1) as f64,
        runs: seeds,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditSummary<T: Serialize> {
    pub kind: String,
    pub passed: bool,
    pub checks_total: usize,
    pub checks_failed: usize,
    pub checks: Vec<Check>,
    pub details: T,
}

/// Result of executing one config.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub checks_total: usize,
    pub checks_failed: usize,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks_failed == 0
    }
}
