//! Aggregation of per-seed reports into method-by-dataset tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MetricKind};

/// Which per-dataset value a table shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableValue {
    /// Metric after the final stage.
    Final,
    Forgetting,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl CellStats {
    pub fn of(values: &[f64]) -> Option<CellStats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(CellStats {
            median: median_sorted(&v),
            min: v[0],
            max: v[v.len() - 1],
            n: v.len(),
        })
    }
}

/// Median of an ascending slice; the mean of the two middle values for even lengths.
pub fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    CellStats::of(values).map(|c| c.median)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub metric: MetricKind,
    pub value: TableValue,
    pub rows: Vec<String>,
    /// Dataset names followed by `mean`.
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<CellStats>>>,
    /// Failed runs per row, excluded from the statistics.
    pub failed: Vec<usize>,
}

pub fn aggregate(reports: &[EvalReport], value: TableValue) -> Result<Table> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Report("no reports to aggregate".into()))?;
    for r in reports {
        if r.datasets != first.datasets || r.scenario != first.scenario || r.metric != first.metric {
            return Err(Error::Report(format!(
                "report '{}' (seed {}) has scenario {} over {:?} ({}); expected {} over {:?} ({})",
                r.label, r.seed, r.scenario, r.datasets, r.metric, first.scenario, first.datasets, first.metric
            )));
        }
    }
    let mut rows: Vec<String> = Vec::new();
    for r in reports {
        if !rows.contains(&r.label) {
            rows.push(r.label.clone());
        }
    }
    let d = first.datasets.len();
    let mut columns = first.datasets.clone();
    columns.push("mean".into());
    let mut cells = Vec::with_capacity(rows.len());
    let mut failed = Vec::with_capacity(rows.len());
    for label in &rows {
        let group: Vec<&EvalReport> = reports.iter().filter(|r| &r.label == label).collect();
        failed.push(group.iter().filter(|r| r.failed).count());
        let per_seed: Vec<Vec<Option<f64>>> = group
            .iter()
            .filter(|r| !r.failed)
            .map(|r| match value {
                TableValue::Final => r.final_row().map(<[_]>::to_vec).unwrap_or_default(),
                TableValue::Forgetting => r.forgetting.clone(),
            })
            .collect();
        let mut row = Vec::with_capacity(d + 1);
        for j in 0..d {
            let vals: Vec<f64> = per_seed.iter().filter_map(|v| v.get(j).copied().flatten()).collect();
            row.push(CellStats::of(&vals));
        }
        let means: Vec<f64> = per_seed
            .iter()
            .filter(|v| v.len() == d && v.iter().all(Option::is_some))
            .map(|v| v.iter().flatten().sum::<f64>() / d as f64)
            .collect();
        row.push(CellStats::of(&means));
        cells.push(row);
    }
    Ok(Table {
        metric: first.metric,
        value,
        rows,
        columns,
        cells,
        failed,
    })
}

impl Table {
    pub fn cell(&self, row: &str, column: &str) -> Option<CellStats> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.columns.iter().position(|c| c == column)?;
        self.cells[i][j]
    }

    /// Aligned text: `median (min-max)` per cell, values in percent.
    pub fn to_text(&self) -> String {
        let title = match self.value {
            TableValue::Final => format!("{} (%) after the final stage", self.metric),
            TableValue::Forgetting => format!("{} forgetting (%)", self.metric),
        };
        let fmt_cell = |c: &Option<CellStats>| match c {
            Some(c) => format!("{:.2} ({:.2}-{:.2})", 100.0 * c.median, 100.0 * c.min, 100.0 * c.max),
            None => "-".into(),
        };
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("method".to_string())
            .chain(self.columns.iter().cloned())
            .collect()];
        for (i, row) in self.rows.iter().enumerate() {
            let mut label = row.clone();
            if self.failed[i] > 0 {
                let _ = write!(label, " [{} failed]", self.failed[i]);
            }
            grid.push(std::iter::once(label).chain(self.cells[i].iter().map(fmt_cell)).collect());
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{title}\n");
        for (i, r) in grid.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, s)| if j == 0 { format!("{s:<w$}", w = widths[j]) } else { format!("{s:>w$}", w = widths[j]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    /// Header row plus one row of medians per method; empty cells have no data.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&r.replace(',', ";"));
            for c in &self.cells[i] {
                out.push(',');
                if let Some(c) = c {
                    out.push_str(&c.median.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Text and CSV renderings of [`aggregate`].
pub fn emit_table(reports: &[EvalReport], value: TableValue) -> Result<(String, String)> {
    let t = aggregate(reports, value)?;
    Ok((t.to_text(), t.to_csv()))
}
