//! Probability and label tables: a header row of the six emotion names, then
//! one row per sample.

use std::path::Path;

use mer_core::{EMOTIONS, N_EMOTIONS};

use crate::CliError;

fn read_rows(path: &Path) -> Result<Vec<[f64; N_EMOTIONS]>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?.clone();
    if headers.len() != N_EMOTIONS {
        return Err(CliError::input(format!(
            "{}: expected {N_EMOTIONS} columns, found {}",
            path.display(),
            headers.len()
        )));
    }
    if headers.iter().map(str::trim).ne(EMOTIONS) {
        return Err(CliError::input(format!("{}: header must be {}", path.display(), EMOTIONS.join(","))));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let mut row = [0.0; N_EMOTIONS];
        for (slot, field) in row.iter_mut().zip(record.iter()) {
            *slot = field
                .trim()
                .parse()
                .map_err(|_| CliError::input(format!("{}: row {}: {field:?} is not a number", path.display(), i + 1)))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_probs(path: &Path) -> Result<Vec<[f64; N_EMOTIONS]>, CliError> {
    read_rows(path)
}

/// Labels are `0` or `1`.
pub fn read_labels(path: &Path) -> Result<Vec<[bool; N_EMOTIONS]>, CliError> {
    read_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.iter().all(|&v| v == 0.0 || v == 1.0) {
                Ok(row.map(|v| v == 1.0))
            } else {
                Err(CliError::input(format!("{}: row {}: labels must be 0 or 1", path.display(), i + 1)))
            }
        })
        .collect()
}

pub fn write_rows(path: &Path, rows: impl IntoIterator<Item = [f64; N_EMOTIONS]>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
    w.write_record(EMOTIONS).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::runtime(e.to_string()))
}
