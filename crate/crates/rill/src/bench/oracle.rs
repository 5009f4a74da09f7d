//! Ground-truth batch evaluation. Walks the same graph description the
//! engine plans, but computes every answer the direct way: full tables in
//! memory, nested-loop joins, per-group recomputation from raw values.
//! None of the engine's incremental state machines are involved, so the
//! engine's final snapshot agreeing with this evaluator is a real check,
//! not a reflection.
//!
//! Schema derivation is shared with the planner on purpose: column names,
//! kinds, and order are the query's contract, and the oracle must speak
//! it to be comparable. Only the values are computed independently.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use crate::edf::{Column, Key, KeyScalar, RowBatch, Value};
use crate::exec::{BoundTable, GraphSpec, NodeKind, NodeSpec};
use crate::inference::AggregateKind;
use crate::ops::{
    join_output_schema, map_output_schema, AggPlan, AggSpec, CmpOp, JoinSpec, JoinType, MapArg,
    MapFunc, Predicate, SortDirection, SortKey,
};
use crate::{Error, Result};

/// Evaluates the query over fully loaded tables, producing the exact
/// batch answer the engine must converge to.
pub fn batch_answer(
    spec: &GraphSpec,
    tables: &IndexMap<String, BoundTable>,
) -> Result<RowBatch> {
    let by_id: HashMap<&str, &NodeSpec> =
        spec.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    eval(&spec.sink, &by_id, tables)
}

fn eval(
    id: &str,
    nodes: &HashMap<&str, &NodeSpec>,
    tables: &IndexMap<String, BoundTable>,
) -> Result<RowBatch> {
    let node = nodes
        .get(id)
        .ok_or_else(|| Error::Graph(format!("oracle found no node {id}")))?;
    match &node.kind {
        NodeKind::Read { table } => {
            let bound = tables
                .get(table)
                .ok_or_else(|| Error::Graph(format!("oracle has no table {table}")))?;
            let parts: Vec<&RowBatch> = bound.partitions.iter().collect();
            RowBatch::concat(bound.schema.clone(), &parts)
        }
        NodeKind::Map { func } => {
            let input = eval(&node.inputs[0], nodes, tables)?;
            eval_map(&input, func)
        }
        NodeKind::Filter { predicate } => {
            let input = eval(&node.inputs[0], nodes, tables)?;
            eval_filter(&input, predicate)
        }
        NodeKind::Join { spec } => {
            let left = eval(&node.inputs[0], nodes, tables)?;
            let right = eval(&node.inputs[1], nodes, tables)?;
            eval_join(&left, &right, spec)
        }
        NodeKind::Agg { group_by, aggs } => {
            let input = eval(&node.inputs[0], nodes, tables)?;
            eval_agg(&input, group_by, aggs)
        }
        NodeKind::SortLimit { keys, limit } => {
            let input = eval(&node.inputs[0], nodes, tables)?;
            eval_sort_limit(&input, keys, *limit)
        }
    }
}

fn eval_map(input: &RowBatch, func: &MapFunc) -> Result<RowBatch> {
    let schema = map_output_schema(&input.schema, func)?;
    let rows = input.row_count();

    // working set: input columns plus derived ones, addressable by name
    let mut working: Vec<(String, Column)> = input
        .schema
        .attributes
        .iter()
        .zip(&input.columns)
        .map(|(a, c)| (a.name.clone(), c.clone()))
        .collect();

    for step in &func.derives {
        let arg_values = |arg: &MapArg| -> Result<Vec<f64>> {
            match arg {
                MapArg::Literal(v) => Ok(vec![*v; rows]),
                MapArg::Column(name) => {
                    let col = working
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, c)| c)
                        .ok_or_else(|| {
                            Error::Schema(format!("oracle found no derive argument {name}"))
                        })?;
                    (0..rows).map(|r| col.value(r).as_f64()).collect()
                }
            }
        };
        let a = arg_values(&step.args[0])?;
        let b = arg_values(&step.args[1])?;
        let out: Vec<f64> = match step.func.as_str() {
            "add" => a.iter().zip(&b).map(|(x, y)| x + y).collect(),
            "sub" => a.iter().zip(&b).map(|(x, y)| x - y).collect(),
            "mul" => a.iter().zip(&b).map(|(x, y)| x * y).collect(),
            "div" => a.iter().zip(&b).map(|(x, y)| x / y).collect(),
            other => return Err(Error::QuerySpec(format!("unknown map function {other:?}"))),
        };
        working.push((step.output.clone(), Column::Float64(out)));
    }

    let columns = schema
        .attributes
        .iter()
        .map(|attr| {
            working
                .iter()
                .find(|(n, _)| *n == attr.name)
                .map(|(_, c)| c.clone())
                .ok_or_else(|| Error::Schema(format!("oracle lost column {}", attr.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    RowBatch::new(schema, columns)
}

fn clause_holds(cell: &Value, op: CmpOp, literal: &Value) -> Result<bool> {
    let ord = match (cell, literal) {
        (Value::Int64(a), Value::Int64(b)) => Some(a.cmp(b)),
        (Value::Float64(a), Value::Float64(b)) => a.partial_cmp(b),
        (Value::Utf8(a), Value::Utf8(b)) => Some(a.as_str().cmp(b.as_str())),
        _ => {
            return Err(Error::Schema(format!(
                "oracle cannot compare {} to {}",
                cell.kind().name(),
                literal.kind().name()
            )))
        }
    };
    // a NaN cell compares to nothing, so it satisfies no clause
    let Some(ord) = ord else { return Ok(false) };
    Ok(match op {
        CmpOp::Eq => ord.is_eq(),
        CmpOp::Ne => ord.is_ne(),
        CmpOp::Lt => ord.is_lt(),
        CmpOp::Le => ord.is_le(),
        CmpOp::Gt => ord.is_gt(),
        CmpOp::Ge => ord.is_ge(),
    })
}

fn eval_filter(input: &RowBatch, predicate: &Predicate) -> Result<RowBatch> {
    let mut cols = Vec::with_capacity(predicate.clauses.len());
    for clause in &predicate.clauses {
        cols.push(input.schema.attribute_index(&clause.column).ok_or_else(|| {
            Error::Schema(format!("oracle found no filter column {}", clause.column))
        })?);
    }
    let mut keep = Vec::new();
    'rows: for row in 0..input.row_count() {
        for (clause, &col) in predicate.clauses.iter().zip(&cols) {
            if !clause_holds(&input.columns[col].value(row), clause.op, &clause.literal)? {
                continue 'rows;
            }
        }
        keep.push(row);
    }
    Ok(input.take(&keep))
}

fn eval_join(left: &RowBatch, right: &RowBatch, spec: &JoinSpec) -> Result<RowBatch> {
    let schema = join_output_schema(
        &left.schema,
        &right.schema,
        spec,
        crate::ops::JoinMethod::Hash,
    )?;

    let left_key: Vec<usize> = spec
        .keys
        .iter()
        .map(|(l, _)| left.schema.attribute_index(l).unwrap())
        .collect();
    let right_key: Vec<usize> = spec
        .keys
        .iter()
        .map(|(_, r)| right.schema.attribute_index(r).unwrap())
        .collect();
    let right_keep: Vec<usize> = right
        .schema
        .attributes
        .iter()
        .enumerate()
        .filter(|(_, a)| !spec.right_columns().contains(&a.name))
        .map(|(i, _)| i)
        .collect();

    let mut columns: Vec<Column> =
        schema.attributes.iter().map(|a| Column::empty(a.value_kind)).collect();

    for lrow in 0..left.row_count() {
        // scan the whole build side: quadratic and proud of it
        let mut matched_row = None;
        for rrow in 0..right.row_count() {
            let hit = left_key
                .iter()
                .zip(&right_key)
                .all(|(&lc, &rc)| left.columns[lc].value(lrow) == right.columns[rc].value(rrow));
            if hit {
                if matched_row.is_some() {
                    return Err(Error::State(
                        "oracle join found a duplicate key on the unique side".into(),
                    ));
                }
                matched_row = Some(rrow);
            }
        }
        if matched_row.is_none() && spec.join_type == JoinType::Inner {
            continue;
        }
        let mut out = 0;
        for col in 0..left.columns.len() {
            columns[out].push(left.columns[col].value(lrow))?;
            out += 1;
        }
        for &col in &right_keep {
            let value = match matched_row {
                Some(rrow) => right.columns[col].value(rrow),
                None => match right.columns[col] {
                    Column::Int64(_) => Value::Int64(0),
                    Column::Float64(_) => Value::Float64(0.0),
                    Column::Utf8(_) => Value::Utf8(String::new()),
                },
            };
            columns[out].push(value)?;
            out += 1;
        }
        if spec.join_type == JoinType::Left {
            columns[out].push(Value::Int64(i64::from(matched_row.is_some())))?;
        }
    }
    RowBatch::new(schema, columns)
}

fn distinct_count(values: &[Value]) -> usize {
    let set: HashSet<KeyScalar> = values.iter().map(Value::to_key_scalar).collect();
    set.len()
}

fn quantile_by_interpolation(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn eval_agg(input: &RowBatch, group_by: &[String], aggs: &[AggSpec]) -> Result<RowBatch> {
    let plan = AggPlan::new(&input.schema, group_by.to_vec(), aggs.to_vec())?;
    // only names, kinds, and column order are taken from the plan
    let schema = plan.output_schema(false)?;

    let mut groups: IndexMap<Key, Vec<usize>> = IndexMap::new();
    for row in 0..input.row_count() {
        groups.entry(input.key_of_row(group_by, row)?).or_default().push(row);
    }

    let mut columns: Vec<Column> =
        schema.attributes.iter().map(|a| Column::empty(a.value_kind)).collect();

    for (key, rows) in &groups {
        for (col, scalar) in columns.iter_mut().zip(key) {
            col.push(scalar.to_value())?;
        }
        for (slot, spec) in aggs.iter().enumerate() {
            let out_col = &mut columns[group_by.len() + slot];
            if spec.kind == AggregateKind::Count {
                out_col.push(Value::Float64(rows.len() as f64))?;
                continue;
            }
            let in_idx = input
                .schema
                .attribute_index(spec.input.as_ref().unwrap())
                .ok_or_else(|| {
                    Error::Schema(format!("oracle found no aggregate input for {}", spec.output))
                })?;
            if spec.kind == AggregateKind::CountDistinct {
                let values: Vec<Value> =
                    rows.iter().map(|&r| input.columns[in_idx].value(r)).collect();
                out_col.push(Value::Float64(distinct_count(&values) as f64))?;
                continue;
            }

            let mut xs: Vec<f64> = rows
                .iter()
                .map(|&r| input.columns[in_idx].value(r).as_f64())
                .collect::<Result<_>>()?;
            let n = xs.len() as f64;
            let value = match spec.kind {
                AggregateKind::Sum => Value::Float64(xs.iter().sum()),
                AggregateKind::Avg => Value::Float64(xs.iter().sum::<f64>() / n),
                AggregateKind::Var | AggregateKind::StdDev => {
                    let mean = xs.iter().sum::<f64>() / n;
                    let vp = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    Value::Float64(if spec.kind == AggregateKind::Var {
                        vp
                    } else {
                        vp.max(0.0).sqrt()
                    })
                }
                AggregateKind::Min | AggregateKind::Max => {
                    let ext = if spec.kind == AggregateKind::Min {
                        xs.iter().copied().fold(f64::INFINITY, f64::min)
                    } else {
                        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    };
                    match input.columns[in_idx] {
                        Column::Int64(_) => Value::Int64(ext as i64),
                        _ => Value::Float64(ext),
                    }
                }
                AggregateKind::OrderStat(_) => {
                    Value::Float64(quantile_by_interpolation(&mut xs, spec.kind.quantile().unwrap()))
                }
                AggregateKind::Count | AggregateKind::CountDistinct => unreachable!(),
            };
            out_col.push(value)?;
        }
    }
    RowBatch::new(schema, columns)
}

fn order_of(a: &Value, b: &Value) -> std::cmp::Ordering {
    match (a, b) {
        (Value::Int64(x), Value::Int64(y)) => x.cmp(y),
        (Value::Float64(x), Value::Float64(y)) => x.total_cmp(y),
        (Value::Utf8(x), Value::Utf8(y)) => x.cmp(y),
        _ => unreachable!("a sort key column holds one kind"),
    }
}

fn eval_sort_limit(input: &RowBatch, keys: &[SortKey], limit: usize) -> Result<RowBatch> {
    let mut key_cols = Vec::with_capacity(keys.len());
    for key in keys {
        key_cols.push((
            input.schema.attribute_index(&key.column).ok_or_else(|| {
                Error::Schema(format!("oracle found no sort column {}", key.column))
            })?,
            key.direction,
        ));
    }
    let pk = input.schema.primary_key.clone();
    let mut pk_keys = Vec::with_capacity(input.row_count());
    for row in 0..input.row_count() {
        pk_keys.push(input.key_of_row(&pk, row)?);
    }
    let mut order: Vec<usize> = (0..input.row_count()).collect();
    order.sort_by(|&a, &b| {
        for &(col, dir) in &key_cols {
            let ord = order_of(&input.columns[col].value(a), &input.columns[col].value(b));
            let ord = if dir == SortDirection::Desc { ord.reverse() } else { ord };
            if !ord.is_eq() {
                return ord;
            }
        }
        pk_keys[a].cmp(&pk_keys[b])
    });
    order.truncate(limit);
    Ok(input.take(&order))
}
