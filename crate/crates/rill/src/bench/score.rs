//! Estimate scoring against an exact answer: per-cell relative and absolute
//! error over matched groups, plus group recall and precision.

use std::collections::HashMap;

use crate::edf::{Key, RowBatch, Value, ValueKind};
use crate::{Error, Result};

/// Aggregate error metrics for one estimate batch.
///
/// `mape` and `mae` are means over every compared cell: a numeric value
/// column of the exact answer, in a group both batches contain. Cells whose
/// true value is zero are excluded from `mape` (relative error is undefined
/// there) and tallied in `zero_true_cells` instead; they still count toward
/// `mae`. `recall` is the fraction of exact groups the estimate has,
/// `precision` the fraction of estimate groups that really exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorecard {
    pub mape: f64,
    pub mae: f64,
    pub recall: f64,
    pub precision: f64,
    pub matched_groups: usize,
    pub compared_cells: usize,
    pub zero_true_cells: usize,
}

fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Int64(x) => Some(*x as f64),
        Value::Float64(x) => Some(*x),
        Value::Utf8(_) => None,
    }
}

/// Scores `estimate` against `exact`, matching rows on the `key` columns.
///
/// The key must identify exact rows uniquely. Every numeric non-key column
/// of the exact batch is compared; the estimate must carry a column of the
/// same name.
pub fn score(estimate: &RowBatch, exact: &RowBatch, key: &[String]) -> Result<Scorecard> {
    let mut truth: HashMap<Key, usize> = HashMap::with_capacity(exact.row_count());
    for row in 0..exact.row_count() {
        let k = exact.key_of_row(key, row)?;
        if truth.insert(k, row).is_some() {
            return Err(Error::Domain("exact answer has duplicate group keys".into()));
        }
    }

    let mut value_cols = Vec::new();
    for (idx, attr) in exact.schema.attributes.iter().enumerate() {
        if key.contains(&attr.name) || attr.value_kind == ValueKind::Utf8 {
            continue;
        }
        let est_idx = estimate
            .schema
            .attributes
            .iter()
            .position(|a| a.name == attr.name)
            .ok_or_else(|| {
                Error::Schema(format!("estimate is missing value column `{}`", attr.name))
            })?;
        value_cols.push((idx, est_idx));
    }

    let mut abs_sum = 0.0;
    let mut rel_sum = 0.0;
    let mut rel_cells = 0usize;
    let mut compared_cells = 0usize;
    let mut zero_true_cells = 0usize;
    let mut matched_groups = 0usize;

    for row in 0..estimate.row_count() {
        let k = estimate.key_of_row(key, row)?;
        let Some(&true_row) = truth.get(&k) else { continue };
        matched_groups += 1;
        for &(true_col, est_col) in &value_cols {
            let tv = numeric(&exact.value(true_col, true_row)).expect("numeric column");
            let ev = numeric(&estimate.value(est_col, row)).ok_or_else(|| {
                Error::Schema(format!(
                    "estimate column `{}` is not numeric",
                    exact.schema.attributes[true_col].name
                ))
            })?;
            let abs = (ev - tv).abs();
            abs_sum += abs;
            compared_cells += 1;
            if tv == 0.0 {
                zero_true_cells += 1;
            } else {
                rel_sum += abs / tv.abs();
                rel_cells += 1;
            }
        }
    }

    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(Scorecard {
        mape: if rel_cells == 0 { 0.0 } else { rel_sum / rel_cells as f64 },
        mae: if compared_cells == 0 { 0.0 } else { abs_sum / compared_cells as f64 },
        recall: ratio(matched_groups, exact.row_count()),
        precision: ratio(matched_groups, estimate.row_count()),
        matched_groups,
        compared_cells,
        zero_true_cells,
    })
}
