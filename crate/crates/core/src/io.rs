//! CSV tables, JSON reports and the versioned model container.
//!
//! Reals are written with Rust's shortest round-trip formatting, so a value
//! read back from any file produced here is bit-identical to the original.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Magic line opening every model file.
pub const MODEL_MAGIC: &str = "SDRMODEL/1";

/// A numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub data: Matrix,
}

impl Table {
    pub fn new(headers: Vec<String>, data: Matrix) -> Result<Self> {
        if headers.len() != data.ncols() {
            return Err(Error::shape("table headers", data.ncols(), headers.len()));
        }
        Ok(Table { headers, data })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))
    }

    /// Columns by name, in the given order.
    pub fn columns(&self, names: &[&str]) -> Result<Matrix> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_fn(self.data.nrows(), idx.len(), |i, j| self.data[(i, idx[j])]))
    }

    pub fn column(&self, name: &str) -> Result<Vector> {
        let j = self.column_index(name)?;
        Ok(self.data.column(j).into_owned())
    }

    /// All columns except `excluded`, with their names.
    pub fn columns_except(&self, excluded: &[&str]) -> (Vec<String>, Matrix) {
        let keep: Vec<usize> = (0..self.headers.len())
            .filter(|&j| !excluded.contains(&self.headers[j].as_str()))
            .collect();
        let names = keep.iter().map(|&j| self.headers[j].clone()).collect();
        let m = Matrix::from_fn(self.data.nrows(), keep.len(), |i, j| self.data[(i, keep[j])]);
        (names, m)
    }
}

/// Read a numeric CSV with a header row.
pub fn load_csv(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

/// Read a CSV and require its header to equal `schema`.
pub fn load_csv_with_schema(path: &Path, schema: &[&str]) -> Result<Table> {
    let table = load_csv(path)?;
    if table.headers.len() != schema.len() {
        return Err(Error::Data(format!(
            "expected {} columns, found {}",
            schema.len(),
            table.headers.len()
        )));
    }
    for (got, want) in table.headers.iter().zip(schema) {
        if got != want {
            return Err(Error::Data(format!("column `{got}` does not match expected `{want}`")));
        }
    }
    Ok(table)
}

pub fn parse_csv(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let headers: Vec<String> = match records.next() {
        Some(rec) => rec?.iter().map(|h| h.trim().to_string()).collect(),
        None => return Err(Error::Data("empty CSV file: missing header row".into())),
    };
    if headers.iter().any(String::is_empty) {
        return Err(Error::Data("line 1: empty column name in header".into()));
    }
    let cols = headers.len();
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in records {
        let rec = rec?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() != cols {
            return Err(Error::Data(format!(
                "line {line}: expected {cols} fields, found {}",
                rec.len()
            )));
        }
        for (field, name) in rec.iter().zip(&headers) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("line {line}: column `{name}`: cannot parse `{field}` as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: column `{name}`: non-finite value")));
            }
            flat.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("CSV file has a header but no data rows".into()));
    }
    Table::new(headers, Matrix::from_row_slice(rows, cols, &flat))
}

pub fn format_csv(headers: &[String], data: &Matrix) -> Result<String> {
    if headers.len() != data.ncols() {
        return Err(Error::shape("csv headers", data.ncols(), headers.len()));
    }
    let mut out = String::new();
    out.push_str(&headers.join(","));
    out.push('\n');
    for row in data.row_iter() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_csv(path: &Path, headers: &[String], data: &Matrix) -> Result<()> {
    write_atomic(path, format_csv(headers, data)?.as_bytes())
}

pub fn save_table(path: &Path, table: &Table) -> Result<()> {
    save_csv(path, &table.headers, &table.data)
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, payload: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(payload)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Serialize `payload` into the versioned model container.
pub fn encode_model<T: Serialize>(payload: &T) -> Result<String> {
    let mut text = String::from(MODEL_MAGIC);
    text.push('\n');
    text.push_str(&serde_json::to_string(payload)?);
    text.push('\n');
    Ok(text)
}

pub fn decode_model<T: DeserializeOwned>(text: &str) -> Result<T> {
    let body = text
        .strip_prefix(MODEL_MAGIC)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| Error::Data(format!("not a model file (missing `{MODEL_MAGIC}` header)")))?;
    Ok(serde_json::from_str(body)?)
}

pub fn save_model<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    write_atomic(path, encode_model(payload)?.as_bytes())
}

pub fn load_model<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode_model(&fs::read_to_string(path)?)
}

/// Write through a sibling temporary file and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("invalid output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
