//! Column-typed observation tables and CSV ingestion.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSpec {
    Count,
    /// Declared levels in increasing order; mapped to `1..=levels.len()`.
    Ordinal { levels: Vec<String> },
    Continuous,
    Group,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Count(Vec<u64>),
    /// 1-based category indices.
    Ordinal(Vec<usize>),
    Continuous(Vec<f64>),
    Group(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Count(v) => v.len(),
            Column::Ordinal(v) => v.len(),
            Column::Continuous(v) => v.len(),
            Column::Group(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Column::Count(_) => "count",
            Column::Ordinal(_) => "ordinal",
            Column::Continuous(_) => "continuous",
            Column::Group(_) => "group",
        }
    }

    fn subset(&self, rows: &[usize]) -> Column {
        match self {
            Column::Count(v) => Column::Count(rows.iter().map(|&i| v[i]).collect()),
            Column::Ordinal(v) => Column::Ordinal(rows.iter().map(|&i| v[i]).collect()),
            Column::Continuous(v) => Column::Continuous(rows.iter().map(|&i| v[i]).collect()),
            Column::Group(v) => Column::Group(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    fn format(&self, i: usize) -> String {
        match self {
            Column::Count(v) => v[i].to_string(),
            Column::Ordinal(v) => v[i].to_string(),
            Column::Continuous(v) => v[i].to_string(),
            Column::Group(v) => v[i].clone(),
        }
    }
}

/// Ordered schema: column name and declared kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<(String, ColumnSpec)>,
}

impl Schema {
    pub fn push(&mut self, name: impl Into<String>, spec: ColumnSpec) -> Result<()> {
        let name = name.into();
        if let Some((_, existing)) = self.columns.iter().find(|(n, _)| *n == name) {
            if *existing != spec {
                return Err(Error::config(
                    format!("column {name:?}"),
                    "column is used with two different kinds",
                ));
            }
            return Ok(());
        }
        self.columns.push((name, spec));
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a column; all columns must have equal length.
    pub fn with(mut self, name: impl Into<String>, column: Column) -> Result<Self> {
        self.push(name, column)?;
        Ok(self)
    }

    pub fn push(&mut self, name: impl Into<String>, column: Column) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Dimension(format!("duplicate column {name:?}")));
        }
        if !self.columns.is_empty() && column.len() != self.n() {
            return Err(Error::Dimension(format!(
                "column {name:?} has {} rows, expected {}",
                column.len(),
                self.n()
            )));
        }
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| &self.columns[j])
            .ok_or_else(|| Error::data(0, name, "column not present"))
    }

    fn wrong_kind(name: &str, want: &str, got: &Column) -> Error {
        Error::data(0, name, format!("expected a {want} column, found {}", got.kind_name()))
    }

    pub fn counts(&self, name: &str) -> Result<&[u64]> {
        match self.column(name)? {
            Column::Count(v) => Ok(v),
            other => Err(Self::wrong_kind(name, "count", other)),
        }
    }

    pub fn ordinal(&self, name: &str) -> Result<&[usize]> {
        match self.column(name)? {
            Column::Ordinal(v) => Ok(v),
            other => Err(Self::wrong_kind(name, "ordinal", other)),
        }
    }

    pub fn continuous(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Continuous(v) => Ok(v),
            other => Err(Self::wrong_kind(name, "continuous", other)),
        }
    }

    pub fn groups(&self, name: &str) -> Result<&[String]> {
        match self.column(name)? {
            Column::Group(v) => Ok(v),
            other => Err(Self::wrong_kind(name, "group", other)),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.subset(rows)).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for i in 0..self.n() {
            w.write_record(self.columns.iter().map(|c| c.format(i)))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_cell(raw: &str, spec: &ColumnSpec, levels: Option<&HashMap<&str, usize>>) -> std::result::Result<Cell, String> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err("missing value".into());
    }
    match spec {
        ColumnSpec::Count => {
            let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
            if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
                return Err(format!("{s:?} is not a nonnegative integer count"));
            }
            Ok(Cell::Count(v as u64))
        }
        ColumnSpec::Ordinal { .. } => levels
            .and_then(|m| m.get(s).copied())
            .map(Cell::Ordinal)
            .ok_or_else(|| format!("undeclared ordinal level {s:?}")),
        ColumnSpec::Continuous => {
            let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
            if !v.is_finite() {
                return Err(format!("{s:?} is not finite"));
            }
            Ok(Cell::Continuous(v))
        }
        ColumnSpec::Group => Ok(Cell::Group(s.to_string())),
    }
}

enum Cell {
    Count(u64),
    Ordinal(usize),
    Continuous(f64),
    Group(String),
}

/// Reads a headed CSV into typed columns. Columns not in the schema are
/// ignored. Row numbers in errors are 1-based data rows.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for (name, _) in &schema.columns {
        let j = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::data(0, name.as_str(), "column missing from header"))?;
        positions.push(j);
    }
    let level_maps: Vec<Option<HashMap<&str, usize>>> = schema
        .columns
        .iter()
        .map(|(_, spec)| match spec {
            ColumnSpec::Ordinal { levels } => {
                Some(levels.iter().enumerate().map(|(k, l)| (l.as_str(), k + 1)).collect())
            }
            _ => None,
        })
        .collect();

    let mut columns: Vec<Column> = schema
        .columns
        .iter()
        .map(|(_, spec)| match spec {
            ColumnSpec::Count => Column::Count(Vec::new()),
            ColumnSpec::Ordinal { .. } => Column::Ordinal(Vec::new()),
            ColumnSpec::Continuous => Column::Continuous(Vec::new()),
            ColumnSpec::Group => Column::Group(Vec::new()),
        })
        .collect();

    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (k, (name, spec)) in schema.columns.iter().enumerate() {
            let raw = record.get(positions[k]).unwrap_or("");
            let cell = parse_cell(raw, spec, level_maps[k].as_ref())
                .map_err(|m| Error::data(row + 1, name.as_str(), m))?;
            match (&mut columns[k], cell) {
                (Column::Count(v), Cell::Count(x)) => v.push(x),
                (Column::Ordinal(v), Cell::Ordinal(x)) => v.push(x),
                (Column::Continuous(v), Cell::Continuous(x)) => v.push(x),
                (Column::Group(v), Cell::Group(x)) => v.push(x),
                _ => unreachable!("cell kind follows column kind"),
            }
        }
    }

    let mut data = Dataset::new();
    for ((name, _), column) in schema.columns.iter().zip(columns) {
        data.push(name.clone(), column)?;
    }
    Ok(data)
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), schema)
}
