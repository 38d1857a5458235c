//! Small CSV writer used by the reports: header row, `.` decimals, LF line
//! endings, shortest round-trip float formatting.

use std::fs;
use std::path::Path;

use crate::error::CliResult;

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn nums(xs: impl IntoIterator<Item = f64>) -> Vec<String> {
    xs.into_iter().map(num).collect()
}

/// `prefix_1_1, prefix_1_2, ...` for an `n × n` matrix, row-major.
pub fn matrix_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n)
        .flat_map(|i| (1..=n).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

pub fn vector_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}
