//! Row filtering. Predicates are conjunctions of column-vs-literal
//! comparisons; literals are typed against the input schema when parsed.

use crate::edf::{EdfSchema, Mutability, RowBatch, Value, ValueKind};
use crate::ops::EstimateBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn token(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "=" | "==" => CmpOp::Eq,
            "!=" => CmpOp::Ne,
            "<" => CmpOp::Lt,
            "<=" => CmpOp::Le,
            ">" => CmpOp::Gt,
            ">=" => CmpOp::Ge,
            other => return Err(Error::QuerySpec(format!("unknown comparison {other:?}"))),
        })
    }

    fn matches(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        matches!(
            (self, ord),
            (CmpOp::Eq, Equal)
                | (CmpOp::Ne, Less)
                | (CmpOp::Ne, Greater)
                | (CmpOp::Lt, Less)
                | (CmpOp::Le, Less)
                | (CmpOp::Le, Equal)
                | (CmpOp::Gt, Greater)
                | (CmpOp::Ge, Greater)
                | (CmpOp::Ge, Equal)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub column: String,
    pub op: CmpOp,
    pub literal: Value,
}

/// Conjunction of comparison clauses.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub clauses: Vec<Clause>,
}

impl Predicate {
    /// Parses `col op literal [and col op literal ...]`, typing each
    /// literal by its column's value kind. String literals may be quoted
    /// with single or double quotes.
    pub fn parse(text: &str, schema: &EdfSchema) -> Result<Predicate> {
        let mut clauses = Vec::new();
        for part in text.split(" and ") {
            let part = part.trim();
            if part.is_empty() {
                return Err(Error::QuerySpec(format!("empty clause in predicate {text:?}")));
            }
            let mut tokens = part.splitn(3, char::is_whitespace);
            let (Some(col), Some(op), Some(lit)) = (tokens.next(), tokens.next(), tokens.next())
            else {
                return Err(Error::QuerySpec(format!(
                    "predicate clause {part:?} is not `column op literal`"
                )));
            };
            let attr = schema.attribute(col).ok_or_else(|| {
                Error::QuerySpec(format!("predicate references unknown column {col}"))
            })?;
            let lit = lit.trim();
            let literal = match attr.value_kind {
                ValueKind::Int64 => Value::Int64(lit.parse().map_err(|_| {
                    Error::QuerySpec(format!("literal {lit:?} is not an integer for {col}"))
                })?),
                ValueKind::Float64 => Value::Float64(lit.parse().map_err(|_| {
                    Error::QuerySpec(format!("literal {lit:?} is not a number for {col}"))
                })?),
                ValueKind::Utf8 => Value::Utf8(unquote(lit).to_string()),
            };
            clauses.push(Clause { column: col.to_string(), op: CmpOp::parse(op)?, literal });
        }
        Ok(Predicate { clauses })
    }

    pub fn to_text(&self) -> String {
        self.clauses
            .iter()
            .map(|c| {
                let lit = match &c.literal {
                    Value::Utf8(s) => format!("\"{s}\""),
                    other => other.to_string(),
                };
                format!("{} {} {}", c.column, c.op.token(), lit)
            })
            .collect::<Vec<_>>()
            .join(" and ")
    }

    pub fn validate(&self, schema: &EdfSchema) -> Result<()> {
        for clause in &self.clauses {
            let attr = schema.attribute(&clause.column).ok_or_else(|| {
                Error::Schema(format!("predicate references unknown column {}", clause.column))
            })?;
            if attr.value_kind != clause.literal.kind() {
                return Err(Error::Schema(format!(
                    "predicate literal for {} has kind {}, column has {}",
                    clause.column,
                    clause.literal.kind().name(),
                    attr.value_kind.name()
                )));
            }
        }
        Ok(())
    }

    /// True when any clause tests a mutable attribute; such filters must
    /// be recomputed from full state instead of applied to deltas.
    pub fn references_mutable(&self, schema: &EdfSchema) -> bool {
        self.clauses.iter().any(|c| {
            schema
                .attribute(&c.column)
                .map(|a| a.mutability == Mutability::Mutable)
                .unwrap_or(false)
        })
    }

    /// Row match. Comparisons are within the column's kind; a NaN cell
    /// matches no clause.
    pub fn eval_row(&self, batch: &RowBatch, row: usize) -> Result<bool> {
        for clause in &self.clauses {
            let col = batch.column(&clause.column).ok_or_else(|| {
                Error::Schema(format!("predicate references unknown column {}", clause.column))
            })?;
            let ord = match (&col.value(row), &clause.literal) {
                (Value::Int64(a), Value::Int64(b)) => Some(a.cmp(b)),
                (Value::Float64(a), Value::Float64(b)) => a.partial_cmp(b),
                (Value::Utf8(a), Value::Utf8(b)) => Some(a.as_str().cmp(b.as_str())),
                (cell, lit) => {
                    return Err(Error::Schema(format!(
                        "predicate on {} compares {} to {}",
                        clause.column,
                        cell.kind().name(),
                        lit.kind().name()
                    )))
                }
            };
            match ord {
                Some(ord) if clause.op.matches(ord) => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }
}

fn unquote(s: &str) -> &str {
    let b = s.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

/// Keeps the rows matching `pred`, with their uncertainty entries.
/// Progress passes through: dropping rows loses no information about how
/// much of the input has been observed.
pub fn apply_filter(input: &EstimateBatch, pred: &Predicate) -> Result<EstimateBatch> {
    let mut keep = Vec::new();
    for row in 0..input.row_count() {
        if pred.eval_row(&input.rows, row)? {
            keep.push(row);
        }
    }
    Ok(input.take(&keep))
}

/// Filter over a mutable attribute, recomputed against the full
/// accumulated state. The caller replaces its previous output wholesale
/// (a refresh) because earlier rows may have moved across the predicate
/// boundary as their values refined.
pub fn shuffle_without_inference(full_state: &EstimateBatch, pred: &Predicate) -> Result<EstimateBatch> {
    apply_filter(full_state, pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::{AttributeDef, Column, Progress};
    use crate::ops::VarCell;

    fn schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("id", ValueKind::Int64),
                AttributeDef::constant("name", ValueKind::Utf8),
                AttributeDef::mutable("score", ValueKind::Float64),
            ],
            vec!["id".into()],
            None,
        )
        .unwrap()
    }

    fn batch() -> EstimateBatch {
        let rows = RowBatch::new(
            schema(),
            vec![
                Column::Int64(vec![1, 2, 3, 4]),
                Column::Utf8(vec!["ann".into(), "bo".into(), "cy".into(), "dee".into()]),
                Column::Float64(vec![0.5, 1.5, f64::NAN, 3.5]),
            ],
        )
        .unwrap();
        let mut b = EstimateBatch::exact(rows, Progress::new(1, 2));
        b.uncertainty.vars.insert(
            "score".into(),
            vec![VarCell::of(0.1), VarCell::of(0.2), VarCell::of(0.3), VarCell::of(0.4)],
        );
        b
    }

    #[test]
    fn parse_round_trips_and_types_literals() {
        let p = Predicate::parse("id >= 2 and name != \"bo\" and score < 3.0", &schema()).unwrap();
        assert_eq!(p.clauses.len(), 3);
        assert_eq!(p.clauses[0].literal, Value::Int64(2));
        assert_eq!(p.clauses[1].literal, Value::Utf8("bo".into()));
        assert_eq!(p.clauses[2].literal, Value::Float64(3.0));
        let reparsed = Predicate::parse(&p.to_text(), &schema()).unwrap();
        assert_eq!(reparsed, p);
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(Predicate::parse("missing = 1", &schema()).is_err());
        assert!(Predicate::parse("id ~ 1", &schema()).is_err());
        assert!(Predicate::parse("id = abc", &schema()).is_err());
        assert!(Predicate::parse("id", &schema()).is_err());
    }

    #[test]
    fn filter_selects_rows_and_keeps_uncertainty_aligned() {
        let input = batch();
        let p = Predicate::parse("id >= 2", &schema()).unwrap();
        let out = apply_filter(&input, &p).unwrap();
        assert_eq!(out.row_count(), 3);
        assert_eq!(out.uncertainty.row_var("score", 0), 0.2);
        assert_eq!(out.progress, input.progress);
    }

    #[test]
    fn conjunction_and_nan_semantics() {
        let input = batch();
        let p = Predicate::parse("id >= 2 and name != \"dee\"", &schema()).unwrap();
        let out = apply_filter(&input, &p).unwrap();
        assert_eq!(out.row_count(), 2);

        // row 3 has a NaN score: no comparison matches, not even !=
        let p = Predicate::parse("score != 99.0", &schema()).unwrap();
        let out = apply_filter(&input, &p).unwrap();
        assert_eq!(out.row_count(), 3);
    }

    #[test]
    fn mutable_reference_detection() {
        let s = schema();
        assert!(!Predicate::parse("id = 1", &s).unwrap().references_mutable(&s));
        assert!(Predicate::parse("score > 1.0", &s).unwrap().references_mutable(&s));
    }

    #[test]
    fn empty_selection_keeps_schema() {
        let input = batch();
        let p = Predicate::parse("id > 100", &schema()).unwrap();
        let out = apply_filter(&input, &p).unwrap();
        assert_eq!(out.row_count(), 0);
        assert_eq!(out.rows.schema, input.rows.schema);
        assert_eq!(out.uncertainty.var_of("score").unwrap().len(), 0);
    }
}
