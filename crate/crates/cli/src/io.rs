//! CSV ingestion and atomic output writing.
//!
//! Input CSVs are comma-separated with a required header row, decimal-point
//! numbers, UTF-8. Blank fields are errors: there is no silent
//! missing-value handling.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::CliError;

/// A numeric table with its column names.
pub struct Table {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::input(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() {
        return Err(CliError::input(format!("{}: no columns", path.display())));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| CliError::input(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        if record.len() != names.len() {
            return Err(CliError::input(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 2,
                record.len(),
                names.len()
            )));
        }
        let mut row = Vec::with_capacity(names.len());
        for (j, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(CliError::input(format!(
                    "{}: row {} column {} is blank",
                    path.display(),
                    i + 2,
                    names[j]
                )));
            }
            let value: f64 = field.parse().map_err(|_| {
                CliError::input(format!(
                    "{}: row {} column {}: `{field}` is not a number",
                    path.display(),
                    i + 2,
                    names[j]
                ))
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("{}: no data rows", path.display())));
    }
    let values = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
    Ok(Table { names, values })
}

/// Reads a single-column CSV as the response vector.
pub fn read_response(path: &Path) -> Result<DVector<f64>, CliError> {
    let table = read_table(path)?;
    if table.values.ncols() != 1 {
        return Err(CliError::input(format!(
            "{}: response must have exactly one column, found {}",
            path.display(),
            table.values.ncols()
        )));
    }
    Ok(table.values.column(0).into_owned())
}

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::input(format!("cannot move {} into place: {e}", path.display())))?;
    Ok(())
}
