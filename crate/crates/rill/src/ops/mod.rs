//! Dataflow operators: map, filter, joins, grouped aggregation, and
//! top-k. Every operator consumes and produces [`EstimateBatch`] payloads
//! so that uncertainty rides along with the rows it describes.
//!
//! Operators here are pure state machines and functions; threading and
//! message routing live in `exec`.

mod agg;
mod filter;
mod join;
mod keys;
mod map;
mod sort;

pub use agg::{
    clustered_mode, merge_agg, to_extrinsic, AggPlan, AggSpec, AggState, ClusteredAgg,
    ExtrinsicOptions, GroupState,
};
pub use filter::{apply_filter, shuffle_without_inference, Clause, CmpOp, Predicate};
pub use join::{
    hash_join, join_output_schema, BuiltIndex, JoinMethod, JoinSpec, JoinType, MergeJoin,
    MATCH_FLAG_COLUMN,
};
pub use keys::{key_rules, KeyOp};
pub use map::{apply_map, map_output_schema, DeriveStep, MapArg, MapFunc};
pub use sort::{sort_limit, SortDirection, SortKey};

use indexmap::IndexMap;

use crate::edf::{EdfSchema, Progress, RowBatch};
use crate::{Error, Result};

/// Variance of one cell plus a flag set when the variance came from an
/// untrustworthy numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarCell {
    pub var: f64,
    pub unstable: bool,
}

impl VarCell {
    pub fn exact() -> Self {
        VarCell { var: 0.0, unstable: false }
    }

    pub fn of(var: f64) -> Self {
        VarCell { var, unstable: false }
    }
}

/// Per-row uncertainty aligned with a batch: one variance vector per
/// mutable attribute (always present, zeros when exact) and optional
/// covariance vectors for attribute pairs consumed downstream. Cross keys
/// are stored with the lexicographically smaller name first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Uncertainty {
    pub vars: IndexMap<String, Vec<VarCell>>,
    pub cross: IndexMap<(String, String), Vec<f64>>,
}

fn cross_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl Uncertainty {
    pub fn empty() -> Self {
        Uncertainty::default()
    }

    /// All-zero uncertainty for every mutable attribute of `schema`.
    pub fn exact_for(schema: &EdfSchema, rows: usize) -> Self {
        let mut vars = IndexMap::new();
        for attr in schema.mutable_attributes() {
            vars.insert(attr.name.clone(), vec![VarCell::exact(); rows]);
        }
        Uncertainty { vars, cross: IndexMap::new() }
    }

    pub fn var_of(&self, column: &str) -> Option<&[VarCell]> {
        self.vars.get(column).map(|v| v.as_slice())
    }

    pub fn row_var(&self, column: &str, row: usize) -> f64 {
        self.vars.get(column).map(|v| v[row].var).unwrap_or(0.0)
    }

    pub fn row_unstable(&self, column: &str, row: usize) -> bool {
        self.vars.get(column).map(|v| v[row].unstable).unwrap_or(false)
    }

    pub fn row_cross(&self, a: &str, b: &str, row: usize) -> f64 {
        if a == b {
            return self.row_var(a, row);
        }
        self.cross.get(&cross_key(a, b)).map(|v| v[row]).unwrap_or(0.0)
    }

    pub fn set_cross(&mut self, a: &str, b: &str, values: Vec<f64>) {
        self.cross.insert(cross_key(a, b), values);
    }

    pub fn take(&self, indices: &[usize]) -> Uncertainty {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
            .collect();
        let cross = self
            .cross
            .iter()
            .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
            .collect();
        Uncertainty { vars, cross }
    }

    /// Row-wise concatenation. All parts must describe the same attribute
    /// and cross sets.
    pub fn concat(parts: &[&Uncertainty]) -> Result<Uncertainty> {
        let Some(first) = parts.first() else {
            return Ok(Uncertainty::empty());
        };
        let mut out = (*first).clone();
        for part in &parts[1..] {
            if part.vars.len() != out.vars.len() || part.cross.len() != out.cross.len() {
                return Err(Error::State("uncertainty parts disagree on attributes".into()));
            }
            for (k, v) in &part.vars {
                let slot = out
                    .vars
                    .get_mut(k)
                    .ok_or_else(|| Error::State(format!("uncertainty part missing {k}")))?;
                slot.extend_from_slice(v);
            }
            for (k, v) in &part.cross {
                let slot = out.cross.get_mut(k).ok_or_else(|| {
                    Error::State(format!("uncertainty part missing cross {}/{}", k.0, k.1))
                })?;
                slot.extend_from_slice(v);
            }
        }
        Ok(out)
    }

    /// Checks alignment with a batch: an entry for exactly the mutable
    /// attributes, matching lengths, non-negative (possibly infinite)
    /// variances, and covariances within the Cauchy-Schwarz bound.
    pub fn validate(&self, batch: &RowBatch) -> Result<()> {
        let rows = batch.row_count();
        let mut expected = 0usize;
        for attr in batch.schema.mutable_attributes() {
            expected += 1;
            let Some(vars) = self.vars.get(&attr.name) else {
                return Err(Error::State(format!(
                    "no uncertainty entry for mutable attribute {}",
                    attr.name
                )));
            };
            if vars.len() != rows {
                return Err(Error::State(format!(
                    "uncertainty for {} has {} rows, batch has {rows}",
                    attr.name,
                    vars.len()
                )));
            }
            if let Some(bad) = vars.iter().find(|c| c.var.is_nan() || c.var < 0.0) {
                return Err(Error::State(format!(
                    "invalid variance {} for {}",
                    bad.var, attr.name
                )));
            }
        }
        if self.vars.len() != expected {
            return Err(Error::State(format!(
                "{} uncertainty entries for {expected} mutable attributes",
                self.vars.len()
            )));
        }
        for ((a, b), values) in &self.cross {
            if values.len() != rows {
                return Err(Error::State(format!("cross {a}/{b} length mismatch")));
            }
            let (Some(va), Some(vb)) = (self.vars.get(a), self.vars.get(b)) else {
                return Err(Error::State(format!("cross {a}/{b} names unknown attributes")));
            };
            for (i, c) in values.iter().enumerate() {
                let bound = (va[i].var * vb[i].var).sqrt();
                if bound.is_finite() && c.abs() > bound + 1e-9 * (1.0 + bound) {
                    return Err(Error::State(format!(
                        "cross {a}/{b} row {i}: |{c}| exceeds sqrt({} * {})",
                        va[i].var, vb[i].var
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A batch of extrinsic rows with aligned uncertainty and the progress of
/// the underlying intrinsic state they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateBatch {
    pub rows: RowBatch,
    pub progress: Progress,
    pub uncertainty: Uncertainty,
}

impl EstimateBatch {
    pub fn new(rows: RowBatch, progress: Progress, uncertainty: Uncertainty) -> Result<Self> {
        uncertainty.validate(&rows)?;
        Ok(EstimateBatch { rows, progress, uncertainty })
    }

    /// Wraps rows whose values carry no uncertainty at all.
    pub fn exact(rows: RowBatch, progress: Progress) -> Self {
        let uncertainty = Uncertainty::exact_for(&rows.schema, rows.row_count());
        EstimateBatch { rows, progress, uncertainty }
    }

    pub fn row_count(&self) -> usize {
        self.rows.row_count()
    }

    pub fn take(&self, indices: &[usize]) -> EstimateBatch {
        EstimateBatch {
            rows: self.rows.take(indices),
            progress: self.progress,
            uncertainty: self.uncertainty.take(indices),
        }
    }
}
