//! Column-oriented numeric table keyed by cell id, with CSV I/O.
//!
//! Missing values are `NaN` in memory and empty fields on disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const ID_COLUMN: &str = "cell_id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataTable {
    pub ids: Vec<u64>,
    pub columns: Vec<Column>,
}

impl DataTable {
    pub fn new(ids: Vec<u64>) -> Self {
        Self {
            ids,
            columns: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.ids.len() {
            return Err(Error::DimensionMismatch {
                expected: self.ids.len(),
                got: values.len(),
            });
        }
        if self.get(&name).is_some() {
            return Err(invalid!("duplicate column `{name}`"));
        }
        self.columns.push(Column { name, values });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| invalid!("column `{name}` not found"))
    }

    /// New table restricted to the given row positions.
    pub fn select_rows(&self, rows: &[usize]) -> DataTable {
        DataTable {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| Column::new(c.name.clone(), rows.iter().map(|&r| c.values[r]).collect()))
                .collect(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![ID_COLUMN.to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (r, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.columns.iter().map(|c| fmt_value(c.values[r])));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<DataTable> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        let id_pos = header
            .iter()
            .position(|h| h == ID_COLUMN)
            .ok_or_else(|| invalid!("{}: no `{ID_COLUMN}` column", path.display()))?;
        let mut ids = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                if j == id_pos {
                    ids.push(field.trim().parse::<u64>().map_err(|_| {
                        invalid!("{}: row {}: bad cell id `{field}`", path.display(), line + 1)
                    })?);
                } else {
                    cols[j].push(parse_value(field).ok_or_else(|| {
                        invalid!(
                            "{}: row {}: column `{}`: not a number `{field}`",
                            path.display(),
                            line + 1,
                            &header[j]
                        )
                    })?);
                }
            }
        }
        let columns = header
            .iter()
            .zip(cols)
            .enumerate()
            .filter(|(j, _)| *j != id_pos)
            .map(|(_, (name, values))| Column::new(name, values))
            .collect();
        Ok(DataTable { ids, columns })
    }
}

pub(crate) fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    s.parse().ok()
}
