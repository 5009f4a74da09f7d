//! Top-k selection over accumulated state: sort by the requested keys,
//! break ties by primary key, keep the first `limit` rows.

use std::cmp::Ordering;

use crate::edf::Value;
use crate::ops::EstimateBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortDirection {
    Asc,
    Desc,
}

impl SortDirection {
    pub fn token(self) -> &'static str {
        match self {
            SortDirection::Asc => "asc",
            SortDirection::Desc => "desc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asc" => Ok(SortDirection::Asc),
            "desc" => Ok(SortDirection::Desc),
            other => Err(Error::QuerySpec(format!("unknown sort direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SortKey {
    pub column: String,
    pub direction: SortDirection,
}

fn value_cmp(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Int64(x), Value::Int64(y)) => x.cmp(y),
        (Value::Float64(x), Value::Float64(y)) => x.total_cmp(y),
        (Value::Utf8(x), Value::Utf8(y)) => x.cmp(y),
        _ => unreachable!("sort compares cells of one column"),
    }
}

/// Sorts the batch by `keys` (then by primary key ascending, so the order
/// is total) and keeps the first `limit` rows with their uncertainty.
pub fn sort_limit(input: &EstimateBatch, keys: &[SortKey], limit: usize) -> Result<EstimateBatch> {
    let batch = &input.rows;
    let mut key_cols = Vec::with_capacity(keys.len());
    for key in keys {
        let idx = batch.schema.attribute_index(&key.column).ok_or_else(|| {
            Error::Schema(format!("sort key references unknown column {}", key.column))
        })?;
        key_cols.push((idx, key.direction));
    }
    let pk = batch.schema.primary_key.clone();
    let mut tiebreak = Vec::with_capacity(batch.row_count());
    for row in 0..batch.row_count() {
        tiebreak.push(batch.key_of_row(&pk, row)?);
    }

    let mut order: Vec<usize> = (0..batch.row_count()).collect();
    order.sort_by(|&a, &b| {
        for &(col, dir) in &key_cols {
            let ord = value_cmp(&batch.columns[col].value(a), &batch.columns[col].value(b));
            let ord = match dir {
                SortDirection::Asc => ord,
                SortDirection::Desc => ord.reverse(),
            };
            if ord != Ordering::Equal {
                return ord;
            }
        }
        tiebreak[a].cmp(&tiebreak[b])
    });
    order.truncate(limit);
    Ok(input.take(&order))
}
