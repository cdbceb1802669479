//! The CSV column schema shipped with the crate, and a reader that checks
//! files against it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Raw text of `schema/csv_schema.toml`.
pub const SCHEMA_TOML: &str = include_str!("../schema/csv_schema.toml");

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema file is malformed: {0}")]
    Malformed(String),
    #[error("no schema for file kind `{0}`")]
    UnknownKind(String),
    #[error("{path}: header {found:?} does not match schema {expected:?}")]
    Header { path: String, expected: Vec<String>, found: Vec<String> },
    #[error("{path}: row {row}, column `{column}`: cannot read {value:?} as {ty}")]
    Cell { path: String, row: usize, column: String, value: String, ty: String },
    #[error("no column `{0}`")]
    NoColumn(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    pub doc: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSchema {
    pub description: String,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub files: BTreeMap<String, FileSchema>,
}

impl Schema {
    pub fn load() -> Result<Schema, SchemaError> {
        toml::from_str(SCHEMA_TOML).map_err(|e| SchemaError::Malformed(e.to_string()))
    }

    pub fn file(&self, kind: &str) -> Result<&FileSchema, SchemaError> {
        self.files.get(kind).ok_or_else(|| SchemaError::UnknownKind(kind.to_string()))
    }

    /// Column names of `kind`, in order.
    pub fn header(&self, kind: &str) -> Result<Vec<&str>, SchemaError> {
        Ok(self.file(kind)?.columns.iter().map(|c| c.name.as_str()).collect())
    }

    /// Reads `path` as a `kind` file, checking the header and every typed cell.
    pub fn read(&self, kind: &str, path: &Path) -> Result<Table, SchemaError> {
        let fs = self.file(kind)?;
        let shown = path.display().to_string();
        let mut reader = csv::Reader::from_path(path)?;
        let found: Vec<String> = reader.headers()?.iter().map(String::from).collect();
        let expected: Vec<String> = fs.columns.iter().map(|c| c.name.clone()).collect();
        if found != expected {
            return Err(SchemaError::Header { path: shown, expected, found });
        }
        let mut rows = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row: Vec<String> = rec.iter().map(String::from).collect();
            for (col, value) in fs.columns.iter().zip(&row) {
                if !value.is_empty() && !type_ok(&col.ty, value) {
                    return Err(SchemaError::Cell {
                        path: shown,
                        row: r + 1,
                        column: col.name.clone(),
                        value: value.clone(),
                        ty: col.ty.clone(),
                    });
                }
            }
            rows.push(row);
        }
        Ok(Table { columns: expected, rows })
    }
}

fn type_ok(ty: &str, value: &str) -> bool {
    match ty {
        "float" => value.parse::<f64>().is_ok(),
        "int" => value.parse::<i64>().is_ok(),
        "bool" => value == "true" || value == "false",
        _ => true,
    }
}

/// Rows of a schema-checked CSV file.
#[derive(Debug, Clone)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn index(&self, column: &str) -> Result<usize, SchemaError> {
        self.columns.iter().position(|c| c == column).ok_or_else(|| SchemaError::NoColumn(column.to_string()))
    }

    pub fn str(&self, row: usize, column: &str) -> Result<&str, SchemaError> {
        Ok(&self.rows[row][self.index(column)?])
    }

    /// `None` for an empty cell.
    pub fn f64(&self, row: usize, column: &str) -> Result<Option<f64>, SchemaError> {
        let s = self.str(row, column)?;
        Ok(if s.is_empty() { None } else { s.parse().ok() })
    }

    /// Indices of rows whose `column` equals `value`.
    pub fn rows_where(&self, column: &str, value: &str) -> Result<Vec<usize>, SchemaError> {
        let k = self.index(column)?;
        Ok((0..self.rows.len()).filter(|&r| self.rows[r][k] == value).collect())
    }
}
