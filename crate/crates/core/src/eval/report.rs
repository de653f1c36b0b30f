//! Metric rows, summaries and plot-ready report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub stage: usize,
    pub tokens: u64,
    pub eval_ce: f64,
    pub eval_acc: f64,
    pub aux: f64,
    pub active_params: u64,
}

#[derive(Serialize, Deserialize)]
struct VersionedRow {
    schema_version: u32,
    run_id: String,
    stage: usize,
    tokens: u64,
    eval_ce: f64,
    eval_acc: f64,
    aux: f64,
    active_params: u64,
}

impl From<&MetricRow> for VersionedRow {
    fn from(r: &MetricRow) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id: r.run_id.clone(),
            stage: r.stage,
            tokens: r.tokens,
            eval_ce: r.eval_ce,
            eval_acc: r.eval_acc,
            aux: r.aux,
            active_params: r.active_params,
        }
    }
}

impl From<VersionedRow> for MetricRow {
    fn from(r: VersionedRow) -> Self {
        Self {
            run_id: r.run_id,
            stage: r.stage,
            tokens: r.tokens,
            eval_ce: r.eval_ce,
            eval_acc: r.eval_acc,
            aux: r.aux,
            active_params: r.active_params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub rows: Vec<MetricRow>,
    pub flops: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub run_id: String,
    pub stage: usize,
    pub tokens: u64,
    pub eval_ce: f64,
    pub eval_acc: f64,
    pub aux: f64,
    pub active_params: u64,
    pub flops: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// `eval_ce(a) - eval_ce(b)`.
    pub delta: f64,
    /// Sign of `delta`: -1 when `a` is better, 1 when `b` is better.
    pub verdict: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
}

pub fn write_metric_rows(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(VersionedRow::from(row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize::<VersionedRow>() {
        let rec = rec?;
        if rec.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Version { found: rec.schema_version, expected: REPORT_SCHEMA_VERSION });
        }
        rows.push(rec.into());
    }
    Ok(rows)
}

fn check_run(run: &RunRecord) -> Result<&MetricRow> {
    let last = run.rows.last().ok_or_else(|| Error::Empty(format!("run {} has no rows", run.run_id)))?;
    for w in run.rows.windows(2) {
        if w[1].tokens < w[0].tokens {
            return Err(Error::Format(format!("run {} rows not monotone in tokens", run.run_id)));
        }
    }
    if let Some(r) = run.rows.iter().find(|r| r.run_id != run.run_id) {
        return Err(Error::Format(format!("row run_id {} inside run {}", r.run_id, run.run_id)));
    }
    Ok(last)
}

/// Summarize runs and pairwise comparisons; writes `metrics.csv` and
/// `summary.json` into `dir` when given.
pub fn emit_report(runs: &[RunRecord], comparisons: &[(String, String)], dir: Option<&Path>) -> Result<ReportSummary> {
    if runs.is_empty() {
        return Err(Error::Empty("no runs to report".into()));
    }
    let mut arms = Vec::with_capacity(runs.len());
    for run in runs {
        let last = check_run(run)?;
        arms.push(ArmSummary {
            run_id: run.run_id.clone(),
            stage: last.stage,
            tokens: last.tokens,
            eval_ce: last.eval_ce,
            eval_acc: last.eval_acc,
            aux: last.aux,
            active_params: last.active_params,
            flops: run.flops,
        });
    }
    let find = |id: &str| {
        arms.iter()
            .find(|a| a.run_id == id)
            .ok_or_else(|| Error::Missing(format!("run {id}")))
    };
    let mut cmp = Vec::with_capacity(comparisons.len());
    for (a, b) in comparisons {
        let delta = find(a)?.eval_ce - find(b)?.eval_ce;
        let verdict = if delta < 0.0 {
            -1
        } else if delta > 0.0 {
            1
        } else {
            0
        };
        cmp.push(Comparison { a: a.clone(), b: b.clone(), delta, verdict });
    }
    let summary = ReportSummary { schema_version: REPORT_SCHEMA_VERSION, arms, comparisons: cmp };
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let rows: Vec<MetricRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        write_metric_rows(&rows, &dir.join("metrics.csv"))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

/// Linear interpolation of a `(xs, ys)` curve at `at`, clamped at the ends.
pub fn resample_curve(xs: &[f64], ys: &[f64], at: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::ShapeMismatch { op: "resample_curve", shapes: vec![vec![xs.len()], vec![ys.len()]] });
    }
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Format("curve x values must be non-decreasing".into()));
    }
    Ok(at
        .iter()
        .map(|&x| {
            if x <= xs[0] {
                return ys[0];
            }
            if x >= xs[xs.len() - 1] {
                return ys[ys.len() - 1];
            }
            let j = xs.partition_point(|&v| v <= x);
            let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
            if x1 == x0 {
                y1
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        })
        .collect())
}
