//! CSV data files, JSON documents and file digests.

use std::fs;
use std::path::Path;

use regdif_core::Dataset;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Parsed CSV table: header plus row-major cells.
struct Table {
    header: Vec<String>,
    rows: usize,
    cells: Vec<String>,
}

fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| CliError::parse(path, 1, e))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::parse(path, 1, "missing header row"));
    }
    let mut cells = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::parse(path, line, e)
        })?;
        if record.len() != header.len() {
            let line = record.position().map_or(0, |p| p.line());
            return Err(CliError::parse(path, line, format!("expected {} fields, found {}", header.len(), record.len())));
        }
        cells.extend(record.iter().map(str::to_string));
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::parse(path, 2, "no data rows"));
    }
    Ok(Table { header, rows, cells })
}

/// Reads a 0/1 response matrix with one column per item.
pub fn read_responses(path: &Path) -> CliResult<(Vec<String>, usize, Vec<u8>)> {
    let table = read_table(path)?;
    let cols = table.header.len();
    let values = table
        .cells
        .iter()
        .enumerate()
        .map(|(k, cell)| match cell.as_str() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(CliError::parse(
                path,
                (k / cols + 2) as u64,
                format!("column {} holds {other:?}, expected 0 or 1", table.header[k % cols]),
            )),
        })
        .collect::<CliResult<_>>()?;
    Ok((table.header, table.rows, values))
}

/// Reads a numeric covariate matrix; the header names the covariates.
pub fn read_covariates(path: &Path) -> CliResult<(Vec<String>, usize, Vec<f64>)> {
    let table = read_table(path)?;
    let cols = table.header.len();
    let values = table
        .cells
        .iter()
        .enumerate()
        .map(|(k, cell)| {
            cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                CliError::parse(path, (k / cols + 2) as u64, format!("column {} holds {cell:?}, expected a finite number", table.header[k % cols]))
            })
        })
        .collect::<CliResult<_>>()?;
    Ok((table.header, table.rows, values))
}

/// Loads a dataset from a response file and a covariate file.
pub fn read_dataset(responses: &Path, covariates: &Path) -> CliResult<Dataset> {
    let (items, n_y, y) = read_responses(responses)?;
    let (names, n_x, x) = read_covariates(covariates)?;
    if n_y != n_x {
        return Err(CliError::Usage(format!(
            "dimension mismatch: {} is {n_y}x{} but {} is {n_x}x{}",
            responses.display(),
            items.len(),
            covariates.display(),
            names.len()
        )));
    }
    Ok(Dataset::new(n_y, items.len(), y, x, names)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes responses with header `item_1..item_J`.
pub fn write_responses(path: &Path, data: &Dataset) -> CliResult<()> {
    let j = data.n_items();
    let mut out = (1..=j).map(|k| format!("item_{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..data.n_persons() {
        let row: Vec<&str> = data.responses_of(i).iter().map(|&y| if y == 1 { "1" } else { "0" }).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Writes covariates in shortest round-trip decimal form.
pub fn write_covariates(path: &Path, data: &Dataset) -> CliResult<()> {
    let mut out = data.covariate_names().join(",");
    out.push('\n');
    for i in 0..data.n_persons() {
        let row: Vec<String> = data.covariates_of(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(format!("cannot serialize: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &to_json(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e.line() as u64, e))
}

/// Lower-case hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
