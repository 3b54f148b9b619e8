//! Per-metric averages over the final iterations of finished runs, computed
//! from the per-seed CSVs alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::run::{CsvRow, CSV_COLUMNS};

/// Rows averaged at the end of every run.
pub const TAIL_ROWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub noise: String,
    pub metric: String,
    pub lambda: f64,
    pub seeds: usize,
    pub return_mean: f64,
    pub return_se: f64,
    pub rate_mean: f64,
    pub rate_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Failed seed files that were skipped.
    pub failed: Vec<PathBuf>,
}

impl Summary {
    pub fn to_csv_text(&self) -> String {
        let mut out =
            String::from("noise,metric,lambda,seeds,return_mean,return_se,risk_averse_rate,risk_averse_rate_se\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                r.noise,
                r.metric,
                r.lambda,
                r.seeds,
                r.return_mean,
                r.return_se,
                r.rate_mean,
                r.rate_se
            )
            .expect("writing to a String");
        }
        out
    }
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect_csvs(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

fn is_failed(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".failed.csv"))
}

fn read_rows(path: &Path) -> Result<Vec<CsvRow>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let headers = reader.headers().map_err(|e| CliError::csv(path, e))?;
    if !headers.iter().eq(CSV_COLUMNS) {
        return Err(CliError::Schema {
            path: path.to_path_buf(),
            msg: format!(
                "unexpected columns {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }
    reader
        .deserialize()
        .collect::<Result<Vec<CsvRow>, _>>()
        .map_err(|e| CliError::csv(path, e))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Summarizes every finished seed CSV below `dir`; seeds are grouped by
/// noise, metric and λ.
pub fn summarize_dir(dir: &Path) -> Result<Summary, CliError> {
    let mut files = Vec::new();
    collect_csvs(dir, &mut files)?;
    files.sort();
    let (failed, finished): (Vec<PathBuf>, Vec<PathBuf>) =
        files.into_iter().partition(|p| is_failed(p));

    let mut groups: BTreeMap<(String, String, String), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for path in &finished {
        let rows = read_rows(path)?;
        let Some(first) = rows.first() else {
            continue;
        };
        let tail = &rows[rows.len().saturating_sub(TAIL_ROWS)..];
        let ret = tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64;
        let rate = tail.iter().map(|r| r.risk_averse_rate).sum::<f64>() / tail.len() as f64;
        let key = (
            first.noise.clone(),
            first.metric.clone(),
            first.lambda.to_string(),
        );
        let g = groups
            .entry(key)
            .or_insert_with(|| (first.lambda, Vec::new(), Vec::new()));
        g.1.push(ret);
        g.2.push(rate);
    }
    if groups.is_empty() {
        return Err(CliError::NoRuns(dir.to_path_buf()));
    }
    let rows = groups
        .into_iter()
        .map(|((noise, metric, _), (lambda, rets, rates))| {
            let (return_mean, return_se) = mean_and_se(&rets);
            let (rate_mean, rate_se) = mean_and_se(&rates);
            SummaryRow {
                noise,
                metric,
                lambda,
                seeds: rets.len(),
                return_mean,
                return_se,
                rate_mean,
                rate_se,
            }
        })
        .collect();
    Ok(Summary { rows, failed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_of_known_sample() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_se(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn failed_files_are_recognised() {
        assert!(is_failed(Path::new("a/seed_3.failed.csv")));
        assert!(!is_failed(Path::new("a/seed_3.csv")));
    }
}
