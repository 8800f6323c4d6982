//! Tabular experiment output.
//!
//! A [`Report`] is a named table whose leading `key_columns` columns identify
//! a job. Rows are sorted by key before emission, so the output does not
//! depend on the order jobs finished in. CSV output starts with `# key: value`
//! comment lines carrying the metadata; JSON output nests rows by key.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Flag(bool),
}

impl Cell {
    fn rank(&self) -> u8 {
        match self {
            Cell::Int(_) => 0,
            Cell::Float(_) => 1,
            Cell::Text(_) => 2,
            Cell::Flag(_) => 3,
        }
    }

    fn cmp_key(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Int(a), Cell::Int(b)) => a.cmp(b),
            (Cell::Float(a), Cell::Float(b)) => a.total_cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Flag(a), Cell::Flag(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            _ => None,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Float(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
            Cell::Text(s) => Value::from(s.as_str()),
            Cell::Flag(b) => Value::from(*b),
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Float(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Flag(b) => write!(f, "{b}"),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Flag(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub metadata: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub key_columns: usize,
    pub rows: Vec<Vec<Cell>>,
}

impl Report {
    pub fn new(name: &str, columns: &[&str], key_columns: usize) -> Self {
        assert!(key_columns <= columns.len());
        Self {
            name: name.to_owned(),
            metadata: BTreeMap::new(),
            columns: columns.iter().map(|c| (*c).to_owned()).collect(),
            key_columns,
            rows: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_owned(), value.into());
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Validation(format!(
                "report {}: row has {} cells, expected {}",
                self.name,
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell at `row` in the named column.
    pub fn get(&self, row: usize, name: &str) -> Option<&Cell> {
        self.column(name).map(|c| &self.rows[row][c])
    }

    fn key_cmp(&self, a: &[Cell], b: &[Cell]) -> Ordering {
        let k = self.key_columns;
        a[..k].iter().zip(&b[..k]).map(|(x, y)| x.cmp_key(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    }

    pub fn sort_rows(&mut self) {
        let mut rows = std::mem::take(&mut self.rows);
        rows.sort_by(|a, b| self.key_cmp(a, b));
        self.rows = rows;
    }

    /// Header line plus data rows, without metadata comments.
    pub fn csv_body(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in self.sorted_rows() {
            w.write_record(row.iter().map(Cell::to_string)).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# report: {}", self.name)?;
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}: {v}")?;
        }
        out.write_all(self.csv_body()?.as_bytes())?;
        Ok(())
    }

    /// `{name, metadata, columns, rows}` with rows nested by key columns.
    pub fn to_json(&self) -> Value {
        let mut nested = Map::new();
        for row in self.sorted_rows() {
            let mut slot = &mut nested;
            for cell in &row[..self.key_columns] {
                let entry = slot.entry(cell.to_string()).or_insert_with(|| Value::Object(Map::new()));
                slot = entry.as_object_mut().expect("key levels are objects");
            }
            for (name, cell) in self.columns.iter().zip(row).skip(self.key_columns) {
                slot.insert(name.clone(), cell.to_json());
            }
        }
        let mut doc = Map::new();
        doc.insert("name".into(), Value::from(self.name.as_str()));
        doc.insert("metadata".into(), serde_json::to_value(&self.metadata).expect("string map"));
        doc.insert("columns".into(), Value::from(self.columns.clone()));
        doc.insert("key_columns".into(), Value::from(self.key_columns));
        doc.insert("rows".into(), Value::Object(nested));
        Value::Object(doc)
    }

    fn sorted_rows(&self) -> Vec<&Vec<Cell>> {
        let mut rows: Vec<&Vec<Cell>> = self.rows.iter().collect();
        rows.sort_by(|a, b| self.key_cmp(a, b));
        rows
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
