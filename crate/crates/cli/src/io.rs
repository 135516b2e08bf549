//! Text formats: the columnar path file and JSON matrix documents.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::Value;
use uvi_core::error::{CoreError, Result};
use uvi_core::model::{rows_to_matrix, VarPath};

/// `t,x1,…,xd` header, one row per observation `t = 1..n`, 17 significant digits so that
/// parsing reproduces every entry bit for bit.
pub fn format_path(path: &VarPath) -> String {
    let data = path.data();
    let d = data.ncols();
    let mut s = String::from("t");
    for j in 1..=d {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for t in 0..data.nrows() {
        s.push_str(&(t + 1).to_string());
        for j in 0..d {
            s.push_str(&format!(",{:.16e}", data[(t, j)]));
        }
        s.push('\n');
    }
    s
}

pub fn parse_path(text: &str) -> Result<VarPath> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| CoreError::Parse("empty path file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("t".to_string()).chain((1..=d).map(|j| format!("x{j}"))).collect();
    if d == 0 || cols != expected {
        return Err(CoreError::Parse(format!("header must be t,x1,…,xd; got {header:?}")));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(CoreError::Parse(format!("row {} has {} fields, expected {}", k + 1, fields.len(), d + 1)));
        }
        let t: usize = fields[0].parse().map_err(|_| CoreError::Parse(format!("bad time index {:?}", fields[0])))?;
        if t != k + 1 {
            return Err(CoreError::Parse(format!("time index {t} out of sequence at row {}", k + 1)));
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| CoreError::Parse(format!("bad number {f:?} at row {}", k + 1)))?;
            values.push(v);
        }
        n += 1;
    }
    VarPath::new(DMatrix::from_row_slice(n, d, &values))
}

pub fn save_path(path: &VarPath, file: &Path) -> Result<()> {
    fs::write(file, format_path(path))?;
    Ok(())
}

pub fn load_path(file: &Path) -> Result<VarPath> {
    parse_path(&read(file)?)
}

pub fn read(file: &Path) -> Result<String> {
    fs::read_to_string(file).map_err(|e| CoreError::Io(format!("{}: {e}", file.display())))
}

/// A matrix given as a JSON array of rows, or an object holding one under `key` (or `estimate`).
pub fn parse_matrix(text: &str, key: &str) -> Result<DMatrix<f64>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
    let rows = match &doc {
        Value::Array(_) => &doc,
        Value::Object(map) => map
            .get(key)
            .or_else(|| map.get("estimate"))
            .ok_or_else(|| CoreError::Parse(format!("object has no {key:?} or \"estimate\" field")))?,
        _ => return Err(CoreError::Parse("expected an array of rows or an object".into())),
    };
    let rows: Vec<Vec<f64>> = serde_json::from_value(rows.clone()).map_err(|e| CoreError::Parse(e.to_string()))?;
    rows_to_matrix(&rows)
}

pub fn load_matrix(file: &Path, key: &str) -> Result<DMatrix<f64>> {
    parse_matrix(&read(file)?, key)
}
