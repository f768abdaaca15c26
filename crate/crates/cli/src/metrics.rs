//! Metric reduction across seeds and deterministic CSV output.

use std::fs;
use std::io::Write;
use std::path::Path;

use opeval_core::mdp::{QFunction, TabularMdp};

use crate::config::MetricChoice;
use crate::HarnessError;

/// Per-iteration mean and standard error over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_seeds: usize,
}

impl MetricSeries {
    /// Reduce per-seed series (all the same length) in seed order.
    pub fn from_runs(runs: &[Vec<f64>]) -> Self {
        let n_seeds = runs.len();
        let len = runs.first().map_or(0, Vec::len);
        assert!(runs.iter().all(|r| r.len() == len), "uneven series");
        let mut mean = vec![0.0; len];
        let mut std_error = vec![0.0; len];
        for t in 0..len {
            let m = runs.iter().map(|r| r[t]).sum::<f64>() / n_seeds as f64;
            let var = runs.iter().map(|r| (r[t] - m).powi(2)).sum::<f64>() / n_seeds as f64;
            mean[t] = m;
            std_error[t] = if n_seeds > 1 { (var / n_seeds as f64).sqrt() } else { 0.0 };
        }
        MetricSeries { mean, std_error, n_seeds }
    }

    pub fn final_mean(&self) -> f64 {
        *self.mean.last().unwrap_or(&f64::NAN)
    }
}

/// Relative error of an estimate against the reference at the start state.
/// Actions whose reference value is zero are excluded from the sum.
pub fn relative_error(
    q: &QFunction<f64>,
    reference: &QFunction<f64>,
    mdp: &TabularMdp<f64>,
    start_state: usize,
    metric: MetricChoice,
) -> f64 {
    let mut acc = 0.0;
    for a in 0..mdp.n_actions() {
        let exact = reference.get(mdp, start_state, a);
        if exact.abs() <= 1e-12 {
            continue;
        }
        let err = (q.get(mdp, start_state, a) - exact).abs() / exact.abs();
        match metric {
            MetricChoice::RelativeSum => acc += err,
            MetricChoice::RelativeMax => acc = acc.max(err),
        }
    }
    acc
}

/// Write a CSV file with a header row, '.' decimals, and '\n' line endings.
/// Float formatting is shortest-roundtrip, so identical inputs give
/// byte-identical files.
pub fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", parent.display())))?;
    }
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for row in rows {
        let mut first = true;
        for value in row {
            if !first {
                out.push(',');
            }
            out.push_str(&format_float(*value));
            first = false;
        }
        out.push('\n');
    }
    let mut file =
        fs::File::create(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    file.write_all(out.as_bytes()).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn format_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        // keep integers readable (iteration indices share the row type)
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// eval/pi series file: `iteration,mean,stderr`.
pub fn write_series(path: &Path, value_name: &str, series: &MetricSeries) -> Result<(), HarnessError> {
    let rows: Vec<Vec<f64>> = series
        .mean
        .iter()
        .zip(&series.std_error)
        .enumerate()
        .map(|(t, (&m, &se))| vec![t as f64, m, se])
        .collect();
    write_csv(path, &format!("iteration,{value_name},stderr"), &rows)
}

/// Square grid file: one CSV row per grid row.
pub fn write_grid(path: &Path, side: usize, values: &[f64]) -> Result<(), HarnessError> {
    assert_eq!(values.len(), side * side);
    let rows: Vec<Vec<f64>> = (0..side).map(|r| values[r * side..(r + 1) * side].to_vec()).collect();
    let header: Vec<String> = (0..side).map(|c| format!("col{c}")).collect();
    write_csv(path, &header.join(","), &rows)
}
