//! Pulmonary function test tables: `case_id,fev1_percent` CSV.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// FEV1% per case, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct PftTable {
    rows: Vec<(String, f64)>,
    index: HashMap<String, usize>,
}

fn check_fev1(v: f64) -> std::result::Result<(), String> {
    if v.is_finite() && v > 0.0 && v <= 200.0 {
        Ok(())
    } else {
        Err(format!("fev1_percent {v} outside (0, 200]"))
    }
}

impl PftTable {
    pub fn new(rows: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut table = Self {
            rows: Vec::new(),
            index: HashMap::new(),
        };
        for (id, v) in rows {
            check_fev1(v).map_err(Error::InvalidData)?;
            table.push(id, v)?;
        }
        Ok(table)
    }

    fn push(&mut self, id: String, v: f64) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateCase(id));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.rows.push((id, v));
        Ok(())
    }

    pub fn fev1(&self, case_id: &str) -> Option<f64> {
        self.index.get(case_id).map(|&i| self.rows[i].1)
    }

    pub fn rows(&self) -> &[(String, f64)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Reads a UTF-8 CSV whose header holds `case_id` and `fev1_percent` columns
/// (others are ignored).
pub fn read_pft_csv(path: impl AsRef<Path>) -> Result<PftTable> {
    let path = path.as_ref();
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => csv_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| csv_err(1, format!("missing column `{name}`")))
    };
    let (id_col, fev_col) = (column("case_id")?, column("fev1_percent")?);

    let mut table = PftTable::new([])?;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(id_col).unwrap_or_default();
        if id.is_empty() {
            return Err(csv_err(line, "empty case_id".into()));
        }
        let raw = record.get(fev_col).unwrap_or_default();
        let v: f64 = raw
            .parse()
            .map_err(|_| csv_err(line, format!("fev1_percent `{raw}` is not a number")))?;
        check_fev1(v).map_err(|m| csv_err(line, m))?;
        table.push(id.to_string(), v)?;
    }
    if table.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }
    Ok(table)
}

pub fn write_pft_csv(table: &PftTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("case_id,fev1_percent\n");
    for (id, v) in &table.rows {
        out.push_str(&format!("{id},{v}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
