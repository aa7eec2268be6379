//! Column-oriented rectangular data.
//!
//! A [`Dataset`] is immutable once built; operations that "modify" it return a
//! new dataset sharing every untouched column through `Arc`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// `codes[i]` indexes into `levels`, which is sorted and deduplicated.
    Categorical { levels: Vec<String>, codes: Vec<u32> },
}

impl Column {
    pub fn numeric(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i,
                column: String::new(),
                value: values[i].to_string(),
            });
        }
        Ok(Column::Numeric(values))
    }

    pub fn categorical<S: AsRef<str>>(values: &[S]) -> Self {
        let mut levels: Vec<String> = values.iter().map(|s| s.as_ref().to_owned()).collect();
        levels.sort();
        levels.dedup();
        let index: HashMap<&str, u32> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let codes = values.iter().map(|s| index[s.as_ref()]).collect();
        Column::Categorical { levels, codes }
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Numeric(_) => ColumnKind::Numeric,
            Column::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            Column::Numeric(_) => None,
            Column::Categorical { levels, .. } => Some(levels),
        }
    }

    /// Rendered cell value, full precision for numerics.
    pub fn cell(&self, row: usize) -> String {
        match self {
            Column::Numeric(v) => format!("{:?}", v[row]),
            Column::Categorical { levels, codes } => levels[codes[row] as usize].clone(),
        }
    }

    fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            // Levels are kept even if a resample no longer observes some of them.
            Column::Categorical { levels, codes } => Column::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: IndexMap<String, Arc<Column>>,
    n_rows: usize,
}

impl Dataset {
    pub fn from_columns<I, S>(columns: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Column)>,
        S: Into<String>,
    {
        let mut map = IndexMap::new();
        let mut n_rows = None;
        for (name, col) in columns {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::Structure("empty column name".into()));
            }
            match n_rows {
                None => n_rows = Some(col.len()),
                Some(n) if n != col.len() => {
                    return Err(Error::Structure(format!(
                        "column `{name}` has {} rows, expected {n}",
                        col.len()
                    )))
                }
                _ => {}
            }
            if map.insert(name.clone(), Arc::new(col)).is_some() {
                return Err(Error::Structure(format!("duplicate column name `{name}`")));
            }
        }
        let n_rows = n_rows.ok_or_else(|| Error::Structure("dataset has no columns".into()))?;
        Ok(Dataset {
            columns: map,
            n_rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::UnknownColumn(name.to_owned()))
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical { .. } => Err(Error::ColumnKind {
                column: name.to_owned(),
                expected: "numeric",
            }),
        }
    }

    /// The column as a 0/1 exposure vector.
    pub fn binary(&self, name: &str) -> Result<&[f64]> {
        let v = self.numeric(name)?;
        if v.iter().all(|&x| x == 0.0 || x == 1.0) {
            Ok(v)
        } else {
            Err(Error::NotBinary(name.to_owned()))
        }
    }

    /// Replace (or append) one column, sharing all others.
    pub fn with_column(&self, name: &str, column: Column) -> Result<Dataset> {
        if column.len() != self.n_rows {
            return Err(Error::Structure(format!(
                "column `{name}` has {} rows, expected {}",
                column.len(),
                self.n_rows
            )));
        }
        let mut columns = self.columns.clone();
        columns.insert(name.to_owned(), Arc::new(column));
        Ok(Dataset {
            columns,
            n_rows: self.n_rows,
        })
    }

    /// Copy of the dataset with the binary column `name` set to `value` on every row.
    pub fn override_exposure(&self, name: &str, value: u8) -> Result<Dataset> {
        if value > 1 {
            return Err(Error::InvalidInput(format!(
                "exposure override must be 0 or 1, got {value}"
            )));
        }
        self.binary(name)?;
        self.with_column(name, Column::Numeric(vec![f64::from(value); self.n_rows]))
    }

    /// Rows `rows` in the given order; indices may repeat.
    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|(k, c)| (k.clone(), Arc::new(c.take(rows))))
            .collect();
        Dataset {
            columns,
            n_rows: rows.len(),
        }
    }

    pub fn filter_rows<F: Fn(usize) -> bool>(&self, keep: F) -> Dataset {
        let rows: Vec<usize> = (0..self.n_rows).filter(|&i| keep(i)).collect();
        self.take_rows(&rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = self.names().collect();
        w.write_record(&header).map_err(csv_err)?;
        for row in 0..self.n_rows {
            let rec: Vec<String> = self.columns.values().map(|c| c.cell(row)).collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Structure(e.to_string()))?;
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(f)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Structure(e.to_string())
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

fn parse_finite(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Read an RFC-4180 CSV with a header row.
///
/// Columns whose every cell parses as a finite real become numeric, the rest
/// categorical; `hints` overrides the inference per column. Missing cells
/// (empty or `NA`) are rejected.
pub fn read_csv<R: Read>(reader: R, hints: &HashMap<String, ColumnKind>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Structure("missing header row".into()));
    }
    for h in hints.keys() {
        if !header.contains(h) {
            return Err(Error::UnknownColumn(h.clone()));
        }
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (c, cell) in rec.iter().enumerate() {
            if is_missing(cell) {
                return Err(Error::Structure(format!(
                    "missing value at row {}, column `{}`",
                    r + 1,
                    header[c]
                )));
            }
            cells[c].push(cell.to_owned());
        }
    }
    if cells[0].is_empty() {
        return Err(Error::Structure("no data rows".into()));
    }
    let mut columns = Vec::with_capacity(header.len());
    for (name, raw) in header.into_iter().zip(cells) {
        let col = match hints.get(&name) {
            Some(ColumnKind::Numeric) => {
                let mut v = Vec::with_capacity(raw.len());
                for (r, cell) in raw.iter().enumerate() {
                    v.push(parse_finite(cell).ok_or_else(|| Error::Parse {
                        row: r + 1,
                        column: name.clone(),
                        value: cell.clone(),
                    })?);
                }
                Column::Numeric(v)
            }
            Some(ColumnKind::Categorical) => Column::categorical(&raw),
            None => match raw.iter().map(|c| parse_finite(c)).collect::<Option<Vec<_>>>() {
                Some(v) => Column::Numeric(v),
                None => Column::categorical(&raw),
            },
        };
        columns.push((name, col));
    }
    Dataset::from_columns(columns)
}

pub fn read_csv_path<P: AsRef<Path>>(
    path: P,
    hints: &HashMap<String, ColumnKind>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(f, hints)
}
