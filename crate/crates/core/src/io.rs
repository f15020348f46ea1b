//! CSV and JSON persistence helpers shared by datasets, models and reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Writes one matrix row per CSV record. Values use shortest round-trip formatting.
pub fn write_matrix_csv(path: &Path, a: &Matrix, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in a.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headerless numeric CSV into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::ShapeMismatch(format!(
                    "{}: row {rows} has {} columns, expected {c}",
                    path.display(),
                    rec.len()
                )))
            }
            _ => {}
        }
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("{}: bad number '{field}': {e}", path.display()))
            })?);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
