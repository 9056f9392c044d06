//! Raw CSV tables with inferred column types.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell values treated as missing (after trimming whitespace).
pub const MISSING_MARKERS: [&str; 3] = ["", "NULL", "?"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    /// Categorical and binary columns keep their raw strings.
    Text(Vec<Option<String>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub data: ColumnData,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Numeric,
            data: ColumnData::Numeric(values),
        }
    }

    pub fn text(name: impl Into<String>, kind: ColumnKind, values: Vec<Option<String>>) -> Self {
        Column {
            name: name.into(),
            kind,
            data: ColumnData::Text(values),
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Text(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match &self.data {
            ColumnData::Numeric(v) => v[row].is_none(),
            ColumnData::Text(v) => v[row].is_none(),
        }
    }

    /// Cell rendered back to text; missing cells render as an empty string.
    pub fn cell_text(&self, row: usize) -> String {
        match &self.data {
            ColumnData::Numeric(v) => v[row].map(|x| x.to_string()).unwrap_or_default(),
            ColumnData::Text(v) => v[row].clone().unwrap_or_default(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Column {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Text(v) => ColumnData::Text(rows.iter().map(|&r| v[r].clone()).collect()),
        };
        Column {
            name: self.name.clone(),
            kind: self.kind,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    columns: Vec<Column>,
    target: String,
}

impl RawTable {
    pub fn new(columns: Vec<Column>, target: impl Into<String>) -> Result<Self> {
        let target = target.into();
        let Some(first) = columns.first() else {
            return Err(Error::Schema("table has no columns".into()));
        };
        let rows = first.len();
        if rows == 0 {
            return Err(Error::Schema("table has no rows".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name '{}'", c.name)));
            }
            if c.len() != rows {
                return Err(Error::Schema(format!(
                    "column '{}' has {} rows, expected {rows}",
                    c.name,
                    c.len()
                )));
            }
        }
        if !seen.contains(target.as_str()) {
            return Err(Error::Schema(format!("target column '{target}' not found")));
        }
        Ok(RawTable { columns, target })
    }

    pub fn n_rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn target_name(&self) -> &str {
        &self.target
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn target(&self) -> &Column {
        self.column(&self.target).expect("target presence is a construction invariant")
    }

    /// Feature columns in file order (target excluded).
    pub fn feature_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(move |c| c.name != self.target)
    }

    pub fn n_features(&self) -> usize {
        self.columns.len() - 1
    }

    /// Keeps only the named features (in the given order) plus the target.
    pub fn with_features(&self, names: &[String]) -> Result<RawTable> {
        let mut cols = Vec::with_capacity(names.len() + 1);
        for n in names {
            let c = self
                .column(n)
                .filter(|c| c.name != self.target)
                .ok_or_else(|| Error::Schema(format!("feature column '{n}' not found")))?;
            cols.push(c.clone());
        }
        cols.push(self.target().clone());
        RawTable::new(cols, self.target.clone())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<RawTable> {
        RawTable::new(
            self.columns.iter().map(|c| c.select_rows(rows)).collect(),
            self.target.clone(),
        )
    }

    /// Returns a copy with a different target column.
    pub fn retarget(&self, target: &str) -> Result<RawTable> {
        RawTable::new(self.columns.clone(), target)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(|e| csv_io(path, e))?;
        for r in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| c.cell_text(r)))
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn is_missing_marker(cell: &str) -> bool {
    MISSING_MARKERS.contains(&cell.trim())
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Infers a column type from its non-missing cells: all numeric → numeric;
/// exactly two distinct values → binary; otherwise categorical.
pub fn infer_kind(cells: &[Option<String>]) -> ColumnKind {
    let present: Vec<&str> = cells.iter().flatten().map(|s| s.as_str()).collect();
    if present.is_empty() {
        return ColumnKind::Numeric;
    }
    if present.iter().all(|c| parse_number(c).is_some()) {
        return ColumnKind::Numeric;
    }
    let distinct: BTreeSet<&str> = present.into_iter().collect();
    if distinct.len() == 2 {
        ColumnKind::Binary
    } else {
        ColumnKind::Categorical
    }
}

fn build_column(name: String, cells: Vec<Option<String>>, hint: Option<ColumnKind>) -> Result<Column> {
    let kind = hint.unwrap_or_else(|| infer_kind(&cells));
    match kind {
        ColumnKind::Numeric => {
            let mut values = Vec::with_capacity(cells.len());
            for (i, c) in cells.iter().enumerate() {
                values.push(match c {
                    None => None,
                    Some(s) => Some(parse_number(s).ok_or_else(|| {
                        Error::Schema(format!("column '{name}' row {i}: '{s}' is not numeric"))
                    })?),
                });
            }
            Ok(Column::numeric(name, values))
        }
        other => Ok(Column::text(name, other, cells)),
    }
}

/// Loads a headered UTF-8 CSV file (RFC 4180 quoting).
pub fn load_csv(
    path: impl AsRef<Path>,
    target: &str,
    hints: &HashMap<String, ColumnKind>,
) -> Result<RawTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, target, hints)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    target: &str,
    hints: &HashMap<String, ColumnKind>,
) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_parse)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Schema("missing header row".into()));
    }
    let mut seen = BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::Schema(format!("duplicate column name '{h}'")));
        }
    }
    if !seen.contains(target) {
        return Err(Error::Schema(format!("target column '{target}' not found")));
    }
    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); headers.len()];
    for record in rdr.records() {
        let record = record.map_err(csv_parse)?;
        for (col, cell) in cells.iter_mut().zip(record.iter()) {
            col.push(if is_missing_marker(cell) {
                None
            } else {
                Some(cell.trim().to_string())
            });
        }
    }
    let columns = headers
        .into_iter()
        .zip(cells)
        .map(|(name, col)| {
            let hint = hints.get(&name).copied();
            build_column(name, col, hint)
        })
        .collect::<Result<Vec<_>>>()?;
    RawTable::new(columns, target)
}

fn csv_parse(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub(crate) fn distinct_text(values: &[Option<String>]) -> Vec<String> {
    let set: BTreeSet<&String> = values.iter().flatten().collect();
    set.into_iter().cloned().collect()
}

pub(crate) fn first_appearance<'s>(values: impl Iterator<Item = &'s Option<String>>) -> Vec<Option<String>> {
    let mut order = Vec::new();
    let mut index = HashMap::new();
    for v in values {
        if !index.contains_key(v) {
            index.insert(v.clone(), order.len());
            order.push(v.clone());
        }
    }
    order
}
