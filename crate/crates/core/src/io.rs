//! CSV and JSON artifact plumbing shared by the command-line tools.
//!
//! Matrices and vectors travel as headered CSV with full-precision floats so
//! that a pipeline rerun with the same seed produces byte-identical files;
//! configs and summaries travel as pretty-printed JSON. Every reader names
//! the offending file and line when it rejects input.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::model::Dataset;

/// Write `v` as a one-column CSV with header `name`.
pub fn write_vector_csv(path: &Path, name: &str, v: ArrayView1<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([name])?;
    for value in v {
        w.write_record([format!("{value:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `m` as CSV with columns `prefix_0 .. prefix_{p-1}`.
pub fn write_matrix_csv(path: &Path, prefix: &str, m: ArrayView2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("{prefix}_{j}")).collect();
    w.write_record(&header)?;
    for row in m.rows() {
        let record: Vec<String> = row.iter().map(|value| format!("{value:.17e}")).collect();
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a one-column headered CSV of floats.
pub fn read_vector_csv(path: &Path) -> Result<Array1<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() != 1 {
        return Err(invalid(format!(
            "{}: expected a single column, found {}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.column(0).to_owned())
}

/// Read a headered CSV of floats; all rows must have the same width. Lines
/// starting with `#` (e.g. a timestamp stamped by the CLI) are skipped.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let width = reader.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        for (field, raw) in record.iter().enumerate() {
            let value: f64 = raw.trim().parse().map_err(|_| {
                invalid(format!(
                    "{}: row {}, column {}: '{}' is not a number",
                    path.display(),
                    idx + 2,
                    field + 1,
                    raw
                ))
            })?;
            values.push(value);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(invalid(format!("{}: no data rows", path.display())));
    }
    Array2::from_shape_vec((rows, width), values)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Load a dataset from a response CSV and an optional covariate CSV.
pub fn read_dataset(y_path: &Path, x_path: Option<&Path>) -> Result<Dataset> {
    let y = read_vector_csv(y_path)?;
    let x = x_path.map(read_matrix_csv).transpose()?;
    Dataset::new(y, x)
}

/// Pretty-print `value` as JSON into `path` with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse the JSON file at `path`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
