//! Seeded dataset generators and a stacked-aggregation query family.
//!
//! `monomial` builds an unclustered fact table whose cumulative row count
//! and live group count both follow power curves of scan progress, so
//! per-group cardinalities grow like t^(row_exponent − group_exponent) in
//! expectation. `deep_table` builds a table clustered on a chain of key
//! columns, and `deep_query` stacks aggregations over ever-shorter key
//! prefixes of that chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edf::{AttributeDef, Column, EdfSchema, RowBatch, ValueKind};
use crate::exec::{GraphSpec, NodeKind, NodeSpec};
use crate::inference::AggregateKind;
use crate::ops::AggSpec;
use crate::{Error, Result};

/// Shape of a [`monomial`] table.
#[derive(Debug, Clone)]
pub struct MonomialSpec {
    pub rows: u64,
    pub groups: u64,
    pub partitions: usize,
    /// Cumulative rows through partition p follow (p/P)^row_exponent.
    pub row_exponent: f64,
    /// Groups eligible by partition p follow (p/P)^group_exponent.
    pub group_exponent: f64,
    pub seed: u64,
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond { Ok(()) } else { Err(Error::Domain(msg.into())) }
}

/// Unclustered table `id:int64 (pk), g:int64, x:float64` with x uniform in
/// [0, 1). Partition p makes groups `0..⌈groups·(p/P)^v⌉` eligible, so early
/// groups accumulate rows over the whole scan while late groups only start
/// near the end.
pub fn monomial(spec: &MonomialSpec) -> Result<(EdfSchema, Vec<RowBatch>)> {
    check(spec.partitions >= 1, "monomial table needs at least one partition")?;
    check(spec.rows >= spec.partitions as u64, "monomial table needs a row per partition")?;
    check(spec.groups >= 1, "monomial table needs at least one group")?;
    check(
        spec.row_exponent > 0.0 && spec.row_exponent.is_finite(),
        "row exponent must be positive and finite",
    )?;
    check(
        spec.group_exponent >= 0.0 && spec.group_exponent.is_finite(),
        "group exponent must be nonnegative and finite",
    )?;

    let schema = EdfSchema::new(
        vec![
            AttributeDef::constant("id", ValueKind::Int64),
            AttributeDef::constant("g", ValueKind::Int64),
            AttributeDef::constant("x", ValueKind::Float64),
        ],
        vec!["id".into()],
        None,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p_total = spec.partitions as f64;
    let mut batches = Vec::with_capacity(spec.partitions);
    let mut cum_prev = 0u64;
    let mut next_id = 0i64;
    for p in 1..=spec.partitions {
        let frac = p as f64 / p_total;
        // Each partition keeps at least one row and leaves one for each
        // remaining partition; the last lands exactly on the row budget.
        let ceiling = spec.rows - (spec.partitions - p) as u64;
        let cum = if p == spec.partitions {
            spec.rows
        } else {
            ((spec.rows as f64 * frac.powf(spec.row_exponent)).round() as u64)
                .clamp(cum_prev + 1, ceiling)
        };
        let avail = ((spec.groups as f64 * frac.powf(spec.group_exponent)).round() as u64)
            .clamp(1, spec.groups);

        let count = (cum - cum_prev) as usize;
        let mut ids = Vec::with_capacity(count);
        let mut gs = Vec::with_capacity(count);
        let mut xs = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(next_id);
            next_id += 1;
            gs.push(rng.random_range(0..avail) as i64);
            xs.push(rng.random::<f64>());
        }
        batches.push(RowBatch::new(
            schema.clone(),
            vec![Column::Int64(ids), Column::Int64(gs), Column::Float64(xs)],
        )?);
        cum_prev = cum;
    }
    Ok((schema, batches))
}

/// Shape of a [`deep_table`].
#[derive(Debug, Clone)]
pub struct DeepSpec {
    pub rows: u64,
    pub partitions: usize,
    /// Number of clustering columns c1..cK.
    pub key_columns: usize,
    /// Each key column draws from 0..branching.
    pub branching: i64,
    /// x draws from 0..value_range.
    pub value_range: i64,
    pub seed: u64,
}

/// Table `id:int64 (pk), c1..cK:int64, x:int64` clustered on (c1, .., cK).
/// Rows are sorted by the full key tuple and partition boundaries fall on
/// tuple changes, so no clustering value spans two partitions.
pub fn deep_table(spec: &DeepSpec) -> Result<(EdfSchema, Vec<RowBatch>)> {
    check(spec.partitions >= 1, "deep table needs at least one partition")?;
    check(spec.rows >= spec.partitions as u64, "deep table needs a row per partition")?;
    check(spec.key_columns >= 1, "deep table needs at least one key column")?;
    check(spec.branching >= 1, "deep table branching must be at least 1")?;
    check(spec.value_range >= 1, "deep table value range must be at least 1")?;

    let mut attrs = vec![AttributeDef::constant("id", ValueKind::Int64)];
    let ck: Vec<String> = (1..=spec.key_columns).map(|i| format!("c{i}")).collect();
    for name in &ck {
        attrs.push(AttributeDef::constant(name.clone(), ValueKind::Int64));
    }
    attrs.push(AttributeDef::constant("x", ValueKind::Int64));
    let schema = EdfSchema::new(attrs, vec!["id".into()], Some(ck))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.rows as usize;
    let mut rows: Vec<(Vec<i64>, i64)> = (0..total)
        .map(|_| {
            let key: Vec<i64> =
                (0..spec.key_columns).map(|_| rng.random_range(0..spec.branching)).collect();
            (key, rng.random_range(0..spec.value_range))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    // Indices one past each run of equal key tuples.
    let mut run_ends = Vec::new();
    for i in 1..total {
        if rows[i].0 != rows[i - 1].0 {
            run_ends.push(i);
        }
    }
    run_ends.push(total);

    let mut ends = Vec::with_capacity(spec.partitions);
    let mut prev = 0usize;
    for p in 1..spec.partitions {
        let target = (spec.rows as u128 * p as u128 / spec.partitions as u128) as usize;
        let want = target.max(prev + 1);
        let end = run_ends[run_ends.partition_point(|&e| e < want)];
        if end >= total {
            return Err(Error::Domain(format!(
                "deep table has too few distinct key tuples for {} partitions",
                spec.partitions
            )));
        }
        ends.push(end);
        prev = end;
    }
    ends.push(total);

    let mut batches = Vec::with_capacity(spec.partitions);
    let mut start = 0usize;
    for end in ends {
        let slice = &rows[start..end];
        let mut columns = vec![Column::Int64((start as i64..end as i64).collect())];
        for k in 0..spec.key_columns {
            columns.push(Column::Int64(slice.iter().map(|(key, _)| key[k]).collect()));
        }
        columns.push(Column::Int64(slice.iter().map(|(_, x)| *x).collect()));
        batches.push(RowBatch::new(schema.clone(), columns)?);
        start = end;
    }
    Ok((schema, batches))
}

/// A query `depth + 1` aggregations deep over a [`deep_table`]: max(x) by
/// (c1..cd), then a sum by each shorter prefix down to the scalar total.
/// Over a table clustered on (c1..cK) with d ≤ K, every level plans as an
/// ordered exact aggregation.
pub fn deep_query(table: &str, depth: usize) -> GraphSpec {
    let prefix = |len: usize| (1..=len).map(|i| format!("c{i}")).collect::<Vec<_>>();
    let mut nodes = vec![NodeSpec {
        id: "scan".into(),
        kind: NodeKind::Read { table: table.into() },
        inputs: vec![],
    }];
    nodes.push(NodeSpec {
        id: "lvl0".into(),
        kind: NodeKind::Agg {
            group_by: prefix(depth),
            aggs: vec![AggSpec {
                kind: AggregateKind::Max,
                input: Some("x".into()),
                output: "peak".into(),
            }],
        },
        inputs: vec!["scan".into()],
    });
    let mut prev_col = "peak".to_string();
    for i in 1..=depth {
        let output = format!("s{i}");
        nodes.push(NodeSpec {
            id: format!("lvl{i}"),
            kind: NodeKind::Agg {
                group_by: prefix(depth - i),
                aggs: vec![AggSpec {
                    kind: AggregateKind::Sum,
                    input: Some(prev_col.clone()),
                    output: output.clone(),
                }],
            },
            inputs: vec![format!("lvl{}", i - 1)],
        });
        prev_col = output;
    }
    let sink = nodes.last().expect("at least the scan").id.clone();
    GraphSpec { nodes, sink }
}

/// Query-file text equivalent of [`deep_query`], with `dir=.` so the file
/// can live inside the table directory it reads. Parsing it yields the
/// same spec as the programmatic form.
pub fn deep_query_text(table: &str, depth: usize) -> String {
    let prefix = |len: usize| (1..=len).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",");
    let by = |len: usize| {
        if len == 0 { String::new() } else { format!("by={} ", prefix(len)) }
    };
    let mut text = format!(
        "# depth-{depth} rollup: max per leaf tuple, then sums up the key prefixes\n\
         table {table} dir=.\n\n\
         node scan read table={table}\n\
         node lvl0 agg input=scan {}aggs=max:x:peak\n",
        by(depth)
    );
    let mut prev_col = "peak".to_string();
    for i in 1..=depth {
        text.push_str(&format!(
            "node lvl{i} agg input=lvl{} {}aggs=sum:{prev_col}:s{i}\n",
            i - 1,
            by(depth - i)
        ));
        prev_col = format!("s{i}");
    }
    text.push_str(&format!("sink lvl{depth}\n"));
    text
}

/// Default query-file text for a [`monomial`] table: a per-group rollup
/// whose count and sum are the quantities the growth model estimates.
pub fn monomial_query_text(table: &str) -> String {
    format!(
        "# per-group rollup over the skewed scan\n\
         table {table} dir=.\n\n\
         node scan read table={table}\n\
         node by_g agg input=scan by=g aggs=count:n,sum:x:total,avg:x:mean_x\n\
         sink by_g\n"
    )
}
