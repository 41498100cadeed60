use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::run::run_pipeline;
use crate::error::{Error, Result};

/// Grid of `alpha x K x mode x seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub clusters: Vec<usize>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub clusters: usize,
    pub mode: Mode,
    pub seed: u64,
    pub mean_accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Run every grid point from `base`; failed points are kept as rows with an
/// error message.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.alphas.is_empty() || grid.clusters.is_empty() || grid.modes.is_empty() || grid.seeds.is_empty() {
        return Err(Error::invalid("every sweep axis needs at least one value"));
    }
    let mut rows = Vec::new();
    for &alpha in &grid.alphas {
        for &k in &grid.clusters {
            for &mode in &grid.modes {
                for &seed in &grid.seeds {
                    let cfg = ExperimentConfig {
                        alpha,
                        clusters: k,
                        mode,
                        seed,
                        output_dir: None,
                        ..base.clone()
                    };
                    let (mean_accuracy, error) = match run_pipeline(&cfg) {
                        Ok(out) => match out.report.error {
                            None => (out.report.mean_accuracy, None),
                            Some(e) => (None, Some(e.message)),
                        },
                        Err(e) => (None, Some(e.to_string())),
                    };
                    rows.push(SweepRow {
                        alpha,
                        clusters: k,
                        mode,
                        seed,
                        mean_accuracy,
                        error,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["alpha", "clusters", "mode", "seed", "mean_accuracy", "error"])?;
    for r in rows {
        w.write_record([
            r.alpha.to_string(),
            r.clusters.to_string(),
            r.mode.to_string(),
            r.seed.to_string(),
            r.mean_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Mode rows against `(alpha, K)` columns, each cell the mean accuracy over
/// seeds in percent (failed runs are left out of the mean).
pub fn pivot_table(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut columns: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if !columns.iter().any(|&(a, k)| a == r.alpha && k == r.clusters) {
            columns.push((r.alpha, r.clusters));
        }
    }
    let mut cells: BTreeMap<Mode, Vec<Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let col = columns
            .iter()
            .position(|&(a, k)| a == r.alpha && k == r.clusters)
            .expect("column registered above");
        let entry = cells.entry(r.mode).or_insert_with(|| vec![Vec::new(); columns.len()]);
        if let Some(a) = r.mean_accuracy {
            entry[col].push(a);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["mode".to_string()];
    header.extend(columns.iter().map(|(a, k)| format!("alpha={a} K={k}")));
    w.write_record(&header)?;
    for (mode, cols) in cells {
        let mut row = vec![mode.to_string()];
        row.extend(cols.iter().map(|v| {
            if v.is_empty() {
                String::new()
            } else {
                format!("{:.2}", 100.0 * v.iter().sum::<f64>() / v.len() as f64)
            }
        }));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
