//! Columnar row batches. A batch is the physical carrier of one partial:
//! a set of rows sharing a schema, stored as per-attribute value vectors.
//! Batches are immutable once built; operators construct new ones.

use crate::{Error, Result};

use super::schema::{EdfSchema, ValueKind};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int64(i64),
    Float64(f64),
    Utf8(String),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Int64(_) => ValueKind::Int64,
            Value::Float64(_) => ValueKind::Float64,
            Value::Utf8(_) => ValueKind::Utf8,
        }
    }

    /// Numeric view used by aggregation and map arithmetic.
    pub fn as_f64(&self) -> Result<f64> {
        match self {
            Value::Int64(v) => Ok(*v as f64),
            Value::Float64(v) => Ok(*v),
            Value::Utf8(s) => Err(Error::Domain(format!("`{s}` is not numeric"))),
        }
    }

    pub fn to_key_scalar(&self) -> KeyScalar {
        match self {
            Value::Int64(v) => KeyScalar::Int(*v),
            Value::Float64(v) => KeyScalar::Bits(v.to_bits()),
            Value::Utf8(s) => KeyScalar::Str(s.clone()),
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Int64(v) => write!(f, "{v}"),
            Value::Float64(v) => write!(f, "{v}"),
            Value::Utf8(s) => write!(f, "{s}"),
        }
    }
}

/// Hashable scalar for primary/group/join keys. Floats compare by bit
/// pattern: key comparison is exact value equality, never tolerance-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyScalar {
    Int(i64),
    Bits(u64),
    Str(String),
}

impl KeyScalar {
    pub fn to_value(&self) -> Value {
        match self {
            KeyScalar::Int(v) => Value::Int64(*v),
            KeyScalar::Bits(b) => Value::Float64(f64::from_bits(*b)),
            KeyScalar::Str(s) => Value::Utf8(s.clone()),
        }
    }
}

pub type Key = Vec<KeyScalar>;

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int64(Vec<i64>),
    Float64(Vec<f64>),
    Utf8(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Int64(v) => v.len(),
            Column::Float64(v) => v.len(),
            Column::Utf8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Column::Int64(_) => ValueKind::Int64,
            Column::Float64(_) => ValueKind::Float64,
            Column::Utf8(_) => ValueKind::Utf8,
        }
    }

    pub fn empty(kind: ValueKind) -> Self {
        match kind {
            ValueKind::Int64 => Column::Int64(Vec::new()),
            ValueKind::Float64 => Column::Float64(Vec::new()),
            ValueKind::Utf8 => Column::Utf8(Vec::new()),
        }
    }

    pub fn value(&self, row: usize) -> Value {
        match self {
            Column::Int64(v) => Value::Int64(v[row]),
            Column::Float64(v) => Value::Float64(v[row]),
            Column::Utf8(v) => Value::Utf8(v[row].clone()),
        }
    }

    pub fn f64_at(&self, row: usize) -> Result<f64> {
        match self {
            Column::Int64(v) => Ok(v[row] as f64),
            Column::Float64(v) => Ok(v[row]),
            Column::Utf8(_) => Err(Error::Domain("utf8 column is not numeric".into())),
        }
    }

    pub fn push(&mut self, value: Value) -> Result<()> {
        match (self, value) {
            (Column::Int64(v), Value::Int64(x)) => v.push(x),
            (Column::Float64(v), Value::Float64(x)) => v.push(x),
            (Column::Utf8(v), Value::Utf8(x)) => v.push(x),
            (col, value) => {
                return Err(Error::Schema(format!(
                    "cannot push {} into {} column",
                    value.kind().name(),
                    col.kind().name()
                )))
            }
        }
        Ok(())
    }

    pub fn extend_from(&mut self, other: &Column) -> Result<()> {
        match (self, other) {
            (Column::Int64(a), Column::Int64(b)) => a.extend_from_slice(b),
            (Column::Float64(a), Column::Float64(b)) => a.extend_from_slice(b),
            (Column::Utf8(a), Column::Utf8(b)) => a.extend_from_slice(b),
            (a, b) => {
                return Err(Error::Schema(format!(
                    "cannot concatenate {} column into {}",
                    b.kind().name(),
                    a.kind().name()
                )))
            }
        }
        Ok(())
    }

    pub fn take(&self, indices: &[usize]) -> Column {
        match self {
            Column::Int64(v) => Column::Int64(indices.iter().map(|&i| v[i]).collect()),
            Column::Float64(v) => Column::Float64(indices.iter().map(|&i| v[i]).collect()),
            Column::Utf8(v) => Column::Utf8(indices.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowBatch {
    pub schema: EdfSchema,
    pub columns: Vec<Column>,
}

impl RowBatch {
    pub fn new(schema: EdfSchema, columns: Vec<Column>) -> Result<Self> {
        if columns.len() != schema.attributes.len() {
            return Err(Error::Schema(format!(
                "{} columns for {} attributes",
                columns.len(),
                schema.attributes.len()
            )));
        }
        let rows = columns.first().map_or(0, Column::len);
        for (attr, col) in schema.attributes.iter().zip(&columns) {
            if col.len() != rows {
                return Err(Error::Schema(format!(
                    "column `{}` has {} rows, expected {rows}",
                    attr.name,
                    col.len()
                )));
            }
            if col.kind() != attr.value_kind {
                return Err(Error::Schema(format!(
                    "column `{}` is {}, declared {}",
                    attr.name,
                    col.kind().name(),
                    attr.value_kind.name()
                )));
            }
        }
        Ok(RowBatch { schema, columns })
    }

    pub fn empty(schema: EdfSchema) -> Self {
        let columns = schema
            .attributes
            .iter()
            .map(|a| Column::empty(a.value_kind))
            .collect();
        RowBatch { schema, columns }
    }

    pub fn row_count(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.schema.attribute_index(name).map(|i| &self.columns[i])
    }

    pub fn value(&self, col: usize, row: usize) -> Value {
        self.columns[col].value(row)
    }

    /// Key tuple of `row` over the named attributes.
    pub fn key_of_row(&self, key_attrs: &[String], row: usize) -> Result<Key> {
        key_attrs
            .iter()
            .map(|name| {
                let idx = self
                    .schema
                    .attribute_index(name)
                    .ok_or_else(|| Error::Schema(format!("unknown key attribute `{name}`")))?;
                Ok(self.columns[idx].value(row).to_key_scalar())
            })
            .collect()
    }

    /// Concatenation of `batches`, all sharing `schema`.
    pub fn concat(schema: EdfSchema, batches: &[&RowBatch]) -> Result<RowBatch> {
        let mut out = RowBatch::empty(schema);
        for b in batches {
            if b.schema.attributes != out.schema.attributes {
                return Err(Error::Schema("concat over differing schemas".into()));
            }
            for (dst, src) in out.columns.iter_mut().zip(&b.columns) {
                dst.extend_from(src)?;
            }
        }
        Ok(out)
    }

    pub fn take(&self, indices: &[usize]) -> RowBatch {
        RowBatch {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.take(indices)).collect(),
        }
    }
}
