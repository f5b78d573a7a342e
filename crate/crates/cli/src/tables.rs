//! CSV and plain-text readers/writers shared by the subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Headerless numeric matrix, one row per line.
pub fn read_matrix(path: &Path) -> CliResult<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(path, e))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| CliError::data(path, format!("row {}: {f:?}: {e}", line + 1))))
            .collect::<CliResult<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CliError::data(
                    path,
                    format!("row {} has {} columns, expected {}", line + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(CliError::data(path, "empty matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((flat.len() / cols, cols), flat).expect("rectangular"))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    for row in m.outer_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn to_csv_string<R: Serialize>(rows: impl IntoIterator<Item = R>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::data(path, format!("{other:?}")),
    }
}

/// `(id, value)` rows from a CSV with a header. When an `is_labeled` column is
/// present (a dataset manifest), labeled rows are dropped so the result covers
/// the evaluation split only.
pub fn read_id_values(path: &Path, value_column: &str) -> CliResult<Vec<(u64, i64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| CliError::data(path, "missing `id` column"))?;
    let value_col =
        col(value_column).ok_or_else(|| CliError::data(path, format!("missing `{value_column}` column")))?;
    let labeled_col = col("is_labeled");
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str, v: &str| CliError::data(path, format!("row {}: bad {what} {v:?}", line + 1));
        if let Some(c) = labeled_col {
            match field(c) {
                "1" | "true" => continue,
                "0" | "false" => {}
                v => return Err(bad("is_labeled", v)),
            }
        }
        let id = field(id_col).parse::<u64>().map_err(|_| bad("id", field(id_col)))?;
        let v = field(value_col).parse::<i64>().map_err(|_| bad(value_column, field(value_col)))?;
        out.push((id, v));
    }
    Ok(out)
}

/// Class ids separated by whitespace or commas.
pub fn read_class_list(path: &Path) -> CliResult<BTreeSet<usize>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| CliError::data(path, format!("bad class id {t:?}"))))
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
