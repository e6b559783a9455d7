use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::stats::StatisticKind;

use super::{method_label, RunResult};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const PVALUES_FILE: &str = "pvalues.csv";
pub const CHANGEPOINTS_FILE: &str = "changepoints.csv";

fn joined(points: &[usize]) -> String {
    points.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `summary.csv` (one row per replication and statistic),
/// `pvalues.csv` (one row per position) and `changepoints.csv` (true and
/// detected points) into `dir`. Output depends only on `results`.
pub fn emit_report(results: &[RunResult], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE))?;
    w.write_record([
        "replication",
        "setting",
        "statistic",
        "method",
        "m",
        "inserted",
        "n_true",
        "n_detected",
        "rand_index",
        "true_points",
        "detected_points",
    ])?;
    for r in results {
        w.write_record([
            r.replication.to_string(),
            r.setting.to_string(),
            r.statistic.to_string(),
            method_label(r.statistic).to_string(),
            r.truth.m().to_string(),
            r.inserted.to_string(),
            r.truth.len().to_string(),
            r.detected.len().to_string(),
            r.rand_index.to_string(),
            joined(r.truth.points()),
            joined(r.detected.points()),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(PVALUES_FILE))?;
    w.write_record(["replication", "statistic", "position", "numerator", "replicates", "pvalue"])?;
    for r in results {
        let t = r.pvalues.replicates();
        for (i, (j, p)) in r.pvalues.numerators().iter().zip(r.pvalues.values()).enumerate() {
            w.write_record([
                r.replication.to_string(),
                r.statistic.to_string(),
                (i + 1).to_string(),
                j.to_string(),
                t.to_string(),
                p.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(CHANGEPOINTS_FILE))?;
    w.write_record(["replication", "statistic", "kind", "index"])?;
    for r in results {
        for (kind, set) in [("truth", &r.truth), ("detected", &r.detected)] {
            for p in set.points() {
                w.write_record([r.replication.to_string(), r.statistic.to_string(), kind.to_string(), p.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Aggregate over replications for one statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub statistic: StatisticKind,
    pub runs: usize,
    pub median_rand_index: f64,
    pub mean_rand_index: f64,
    pub median_detected: f64,
    /// Fraction of runs with at least one detected change point.
    pub any_detection_rate: f64,
    /// Fraction of runs with every true change point matched within `B`.
    pub boundary_hit_rate: f64,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len() / 2;
    if values.len() % 2 == 1 {
        values[k]
    } else {
        (values[k - 1] + values[k]) / 2.0
    }
}

/// Per-statistic summaries in order of first appearance. `tol` is the
/// boundary-matching tolerance (normally the window `B`).
pub fn summarize(results: &[RunResult], tol: usize) -> Vec<MethodSummary> {
    let mut order: Vec<StatisticKind> = Vec::new();
    for r in results {
        if !order.contains(&r.statistic) {
            order.push(r.statistic);
        }
    }
    order
        .into_iter()
        .map(|kind| {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.statistic == kind).collect();
            let n = runs.len() as f64;
            let mut ri: Vec<f64> = runs.iter().map(|r| r.rand_index).collect();
            let mean = ri.iter().sum::<f64>() / n;
            let mut det: Vec<f64> = runs.iter().map(|r| r.detected.len() as f64).collect();
            MethodSummary {
                statistic: kind,
                runs: runs.len(),
                median_rand_index: median(&mut ri),
                mean_rand_index: mean,
                median_detected: median(&mut det),
                any_detection_rate: runs.iter().filter(|r| !r.detected.is_empty()).count() as f64 / n,
                boundary_hit_rate: runs.iter().filter(|r| r.boundaries_within(tol)).count() as f64 / n,
            }
        })
        .collect()
}
