//! Schema-checked tables, persisted as comma-delimited text.
//!
//! The first record holds the column names, the second their types, and
//! every further record is a row.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FedcoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnType {
    Int,
    Float,
    String,
    Timestamp,
}

impl ColumnType {
    pub fn is_numeric(self) -> bool {
        !matches!(self, ColumnType::String)
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Int => "int",
            ColumnType::Float => "float",
            ColumnType::String => "string",
            ColumnType::Timestamp => "timestamp",
        })
    }
}

impl FromStr for ColumnType {
    type Err = FedcoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "int" => Ok(ColumnType::Int),
            "float" => Ok(ColumnType::Float),
            "string" => Ok(ColumnType::String),
            "timestamp" => Ok(ColumnType::Timestamp),
            other => Err(FedcoreError::InvalidArgument(format!("unknown column type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

impl Column {
    pub fn new(name: &str, ty: ColumnType) -> Self {
        Column { name: name.into(), ty }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "kebab-case")]
pub enum Cell {
    Int(i64),
    Float(f64),
    String(String),
    Timestamp(u64),
}

impl Cell {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Cell::Int(_) => ColumnType::Int,
            Cell::Float(_) => ColumnType::Float,
            Cell::String(_) => ColumnType::String,
            Cell::Timestamp(_) => ColumnType::Timestamp,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(v) => Some(*v as f64),
            Cell::Float(v) => Some(*v),
            Cell::Timestamp(v) => Some(*v as f64),
            Cell::String(_) => None,
        }
    }

    fn to_field(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:?}"),
            Cell::String(v) => v.clone(),
            Cell::Timestamp(v) => v.to_string(),
        }
    }

    fn parse(ty: ColumnType, field: &str) -> Result<Cell, FedcoreError> {
        let bad = || FedcoreError::InvalidArgument(format!("{field:?} is not a valid {ty}"));
        Ok(match ty {
            ColumnType::Int => Cell::Int(field.parse().map_err(|_| bad())?),
            ColumnType::Float => Cell::Float(field.parse().map_err(|_| bad())?),
            ColumnType::String => Cell::String(field.to_string()),
            ColumnType::Timestamp => Cell::Timestamp(field.parse().map_err(|_| bad())?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTable {
    pub table_id: String,
    pub schema: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
    pub version: u64,
}

impl DataTable {
    pub fn new(table_id: &str, schema: Vec<Column>) -> Result<Self, FedcoreError> {
        super::object::check_object_id(table_id)?;
        if schema.is_empty() {
            return Err(FedcoreError::InvalidArgument(format!("table {table_id} has no columns")));
        }
        for (i, c) in schema.iter().enumerate() {
            if c.name.is_empty() || c.name.contains(['/', ',', '\n']) {
                return Err(FedcoreError::InvalidArgument(format!("bad column name {:?}", c.name)));
            }
            if schema[..i].iter().any(|o| o.name == c.name) {
                return Err(FedcoreError::InvalidArgument(format!("duplicate column {}", c.name)));
            }
        }
        Ok(DataTable {
            table_id: table_id.into(),
            schema,
            rows: Vec::new(),
            version: 0,
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn check_row(&self, row: &[Cell]) -> Result<(), FedcoreError> {
        if row.len() != self.schema.len() {
            return Err(FedcoreError::InvalidArgument(format!(
                "row has {} cells, table {} has {} columns",
                row.len(),
                self.table_id,
                self.schema.len()
            )));
        }
        for (cell, col) in row.iter().zip(&self.schema) {
            if cell.column_type() != col.ty {
                return Err(FedcoreError::InvalidArgument(format!(
                    "column {} expects {}, got {}",
                    col.name,
                    col.ty,
                    cell.column_type()
                )));
            }
            if let Cell::Float(v) = cell {
                if !v.is_finite() {
                    return Err(FedcoreError::InvalidArgument(format!("column {} needs a finite float", col.name)));
                }
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, row: Vec<Cell>) -> Result<u64, FedcoreError> {
        self.check_row(&row)?;
        self.rows.push(row);
        self.version += 1;
        Ok(self.version)
    }

    /// Replace all rows at once; nothing changes if any row is malformed.
    pub fn replace_rows(&mut self, rows: Vec<Vec<Cell>>) -> Result<u64, FedcoreError> {
        for r in &rows {
            self.check_row(r)?;
        }
        self.rows = rows;
        self.version += 1;
        Ok(self.version)
    }

    pub fn to_text(&self) -> Result<String, FedcoreError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| FedcoreError::Io(e.to_string());
        w.write_record(self.schema.iter().map(|c| c.name.as_str())).map_err(err)?;
        w.write_record(self.schema.iter().map(|c| c.ty.to_string())).map_err(err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::to_field)).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| FedcoreError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn from_text(table_id: &str, version: u64, text: &str) -> Result<Self, FedcoreError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut records = r.records();
        let mut next = || -> Result<Option<csv::StringRecord>, FedcoreError> {
            records
                .next()
                .transpose()
                .map_err(|e| FedcoreError::InvalidArgument(format!("table file: {e}")))
        };
        let names = next()?.ok_or_else(|| FedcoreError::InvalidArgument("table file has no header".into()))?;
        let types = next()?.ok_or_else(|| FedcoreError::InvalidArgument("table file has no schema line".into()))?;
        if names.len() != types.len() {
            return Err(FedcoreError::InvalidArgument("header and schema line differ in length".into()));
        }
        let schema = names
            .iter()
            .zip(types.iter())
            .map(|(n, t)| Ok(Column::new(n, t.parse()?)))
            .collect::<Result<Vec<_>, FedcoreError>>()?;
        let mut table = DataTable::new(table_id, schema)?;
        while let Some(rec) = next()? {
            if rec.len() != table.schema.len() {
                return Err(FedcoreError::InvalidArgument(format!("row arity {} in table {table_id}", rec.len())));
            }
            let row = rec
                .iter()
                .zip(&table.schema)
                .map(|(f, c)| Cell::parse(c.ty, f))
                .collect::<Result<Vec<_>, _>>()?;
            table.check_row(&row)?;
            table.rows.push(row);
        }
        table.version = version;
        Ok(table)
    }

    pub fn save(&self, dir: &Path) -> Result<(), FedcoreError> {
        let base = self.table_id.replace('/', "~");
        std::fs::write(dir.join(format!("{base}.csv")), self.to_text()?).map_err(FedcoreError::io)?;
        std::fs::write(dir.join(format!("{base}.version")), self.version.to_string()).map_err(FedcoreError::io)
    }

    pub fn load(dir: &Path, table_id: &str) -> Result<Self, FedcoreError> {
        let base = table_id.replace('/', "~");
        let text = std::fs::read_to_string(dir.join(format!("{base}.csv"))).map_err(FedcoreError::io)?;
        let version = std::fs::read_to_string(dir.join(format!("{base}.version")))
            .map_err(FedcoreError::io)?
            .trim()
            .parse()
            .map_err(|_| FedcoreError::InvalidArgument(format!("bad version file for {table_id}")))?;
        DataTable::from_text(table_id, version, &text)
    }
}
