//! Key propagation: what each operator does to the primary and
//! clustering keys of its inputs. The graph builder uses these rules to
//! derive every node's output keys statically, before any data moves.

use crate::edf::{EdfSchema, Mutability};
use crate::ops::{
    clustered_mode, join_output_schema, map_output_schema, JoinMethod, JoinSpec, MapFunc,
};
use crate::{Error, Result};

/// Operator shape as far as keys are concerned.
#[derive(Debug, Clone, Copy)]
pub enum KeyOp<'a> {
    Map { func: &'a MapFunc },
    Filter,
    SortLimit,
    Join { spec: &'a JoinSpec, method: JoinMethod },
    Agg { group_by: &'a [String] },
}

fn unary<'a>(inputs: &[&'a EdfSchema], op: &str) -> Result<&'a EdfSchema> {
    match inputs {
        [one] => Ok(one),
        _ => Err(Error::Graph(format!("{op} takes exactly one input, got {}", inputs.len()))),
    }
}

/// Derives (primary key, clustering key) of an operator's output.
///
/// Filter and map keep the input primary key (map must not project it
/// away). Joins keep the probe side's primary key. Aggregation keys its
/// output by the grouping attributes; when those are a prefix of the
/// input clustering key the output stays clustered on them, otherwise
/// the output is refined in place and carries no clustering key. Top-k
/// output is recomputed wholesale per snapshot, so its clustering key is
/// dropped too.
pub fn key_rules(
    op: KeyOp<'_>,
    inputs: &[&EdfSchema],
) -> Result<(Vec<String>, Option<Vec<String>>)> {
    match op {
        KeyOp::Map { func } => {
            let schema = map_output_schema(unary(inputs, "map")?, func)?;
            Ok((schema.primary_key, schema.clustering_key))
        }
        KeyOp::Filter => {
            let input = unary(inputs, "filter")?;
            Ok((input.primary_key.clone(), input.clustering_key.clone()))
        }
        KeyOp::SortLimit => {
            let input = unary(inputs, "sort_limit")?;
            Ok((input.primary_key.clone(), None))
        }
        KeyOp::Join { spec, method } => match inputs {
            [left, right] => {
                let schema = join_output_schema(left, right, spec, method)?;
                Ok((schema.primary_key, schema.clustering_key))
            }
            _ => Err(Error::Graph(format!("join takes exactly two inputs, got {}", inputs.len()))),
        },
        KeyOp::Agg { group_by } => {
            let input = unary(inputs, "aggregation")?;
            for g in group_by {
                match input.attribute(g) {
                    None => return Err(Error::Graph(format!("group key {g} does not exist"))),
                    Some(attr) if attr.mutability != Mutability::Constant => {
                        return Err(Error::Graph(format!("group key {g} is mutable")))
                    }
                    Some(_) => {}
                }
            }
            let ck = clustered_mode(input, group_by).then(|| group_by.to_vec());
            Ok((group_by.to_vec(), ck))
        }
    }
}
