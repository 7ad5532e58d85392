//! `metric,value` reports.

use std::path::Path;

use sdeawb_core::metrics::ErrorStats;

use crate::error::{CliError, Result};

pub const REPORT_HEADER: [&str; 2] = ["metric", "value"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.rows.push((metric.into(), value));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|(m, _)| m == metric).map(|r| r.1)
    }

    /// Adds `{prefix}_mean`, `_median`, `_trimean` and `_worst25`.
    pub fn push_stats(&mut self, prefix: &str, s: &ErrorStats) {
        self.push(format!("{prefix}_mean"), s.mean);
        self.push(format!("{prefix}_median"), s.median);
        self.push(format!("{prefix}_trimean"), s.trimean);
        self.push(format!("{prefix}_worst25"), s.worst25_mean);
    }

    /// Values use the shortest representation that parses back exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_HEADER)?;
        for (m, v) in &self.rows {
            w.write_record([m.as_str(), &v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != REPORT_HEADER {
            return Err(CliError::Data(format!(
                "{}: header must be `metric,value`",
                path.display()
            )));
        }
        let mut rep = Report::default();
        for (k, row) in r.records().enumerate() {
            let row = row?;
            let v = row[1].parse().map_err(|_| {
                CliError::Data(format!(
                    "{}: row {}: bad value {:?}",
                    path.display(),
                    k + 1,
                    &row[1]
                ))
            })?;
            rep.push(&row[0], v);
        }
        Ok(rep)
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0);
        self.rows
            .iter()
            .map(|(m, v)| format!("{m:<w$}  {v:.4}\n"))
            .collect()
    }
}
