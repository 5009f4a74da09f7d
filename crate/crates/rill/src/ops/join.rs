//! Equi-joins. Hash join blocks on one side (drained to its final state
//! before any probe row is matched); merge join streams both sides of
//! key-ordered inputs and retires keys below the joint watermark, so its
//! deltas stay key-disjoint.
//!
//! Both joins are many-to-one: the right (build) side must be unique on
//! the join key, which keeps the probe side's primary key valid for the
//! output. Left joins fill non-matches with typed defaults and add a
//! constant `matched` flag column.

use std::collections::HashMap;

use crate::edf::{
    AttributeDef, Column, EdfSchema, Key, Mutability, Progress, RowBatch, Value, ValueKind,
};
use crate::ops::{EstimateBatch, Uncertainty, VarCell};
use crate::{Error, Result};

/// Flag column appended by left joins: 1 for matched rows, 0 for rows
/// that took default values.
pub const MATCH_FLAG_COLUMN: &str = "matched";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinType {
    Inner,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoinMethod {
    Hash,
    Merge,
}

/// Join keys as (probe/left column, build/right column) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinSpec {
    pub keys: Vec<(String, String)>,
    pub join_type: JoinType,
}

impl JoinSpec {
    pub fn left_columns(&self) -> Vec<String> {
        self.keys.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn right_columns(&self) -> Vec<String> {
        self.keys.iter().map(|(_, r)| r.clone()).collect()
    }
}

fn default_value(kind: ValueKind) -> Value {
    match kind {
        ValueKind::Int64 => Value::Int64(0),
        ValueKind::Float64 => Value::Float64(0.0),
        ValueKind::Utf8 => Value::Utf8(String::new()),
    }
}

/// Output schema: probe/left columns, then build/right columns minus the
/// join keys, plus the match flag for left joins. The probe side's
/// primary key carries over; the clustering key is the probe's for hash
/// joins and the join key itself for merge joins.
pub fn join_output_schema(
    left: &EdfSchema,
    right: &EdfSchema,
    spec: &JoinSpec,
    method: JoinMethod,
) -> Result<EdfSchema> {
    if spec.keys.is_empty() {
        return Err(Error::Graph("join needs at least one key pair".into()));
    }
    for (l, r) in &spec.keys {
        let la = left
            .attribute(l)
            .ok_or_else(|| Error::Graph(format!("left join key {l} does not exist")))?;
        let ra = right
            .attribute(r)
            .ok_or_else(|| Error::Graph(format!("right join key {r} does not exist")))?;
        if la.value_kind != ra.value_kind {
            return Err(Error::Graph(format!(
                "join key pair {l}/{r} mixes {} and {}",
                la.value_kind.name(),
                ra.value_kind.name()
            )));
        }
        if la.mutability != Mutability::Constant || ra.mutability != Mutability::Constant {
            return Err(Error::Graph(format!("join key pair {l}/{r} must be constant")));
        }
    }
    // uniqueness on the build side: its primary key must be covered
    let right_keys = spec.right_columns();
    for pk in &right.primary_key {
        if !right_keys.contains(pk) {
            return Err(Error::Graph(format!(
                "right side of a join must be unique on the join key; its key column {pk} is not joined"
            )));
        }
    }

    let mut attrs = left.attributes.clone();
    for attr in &right.attributes {
        if right_keys.contains(&attr.name) {
            continue;
        }
        if attrs.iter().any(|a| a.name == attr.name) {
            return Err(Error::Graph(format!(
                "column {} exists on both sides of the join; project or rename first",
                attr.name
            )));
        }
        attrs.push(attr.clone());
    }
    if spec.join_type == JoinType::Left {
        if attrs.iter().any(|a| a.name == MATCH_FLAG_COLUMN) {
            return Err(Error::Graph(format!(
                "left join adds a {MATCH_FLAG_COLUMN} column but one already exists"
            )));
        }
        attrs.push(AttributeDef::constant(MATCH_FLAG_COLUMN, ValueKind::Int64));
    }
    let ck = match method {
        JoinMethod::Hash => left.clustering_key.clone(),
        JoinMethod::Merge => Some(spec.left_columns()),
    };
    EdfSchema::new(attrs, left.primary_key.clone(), ck)
}

/// Fully materialized build side of a hash join, indexed by join key.
pub struct BuiltIndex {
    pub batch: RowBatch,
    pub key_columns: Vec<String>,
    map: HashMap<Key, usize>,
}

impl BuiltIndex {
    pub fn new(batch: RowBatch, key_columns: Vec<String>) -> Result<Self> {
        let mut map = HashMap::with_capacity(batch.row_count());
        for row in 0..batch.row_count() {
            let key = batch.key_of_row(&key_columns, row)?;
            if map.insert(key.clone(), row).is_some() {
                return Err(Error::State(format!(
                    "build side has duplicate join key {key:?}"
                )));
            }
        }
        Ok(BuiltIndex { batch, key_columns, map })
    }

    pub fn lookup(&self, key: &Key) -> Option<usize> {
        self.map.get(key).copied()
    }
}

/// Joins one probe batch against the built side. Probe rows keep their
/// uncertainty (including cross entries); build-side values are final, so
/// their mutable columns join in with zero variance.
pub fn hash_join(
    probe: &EstimateBatch,
    index: &BuiltIndex,
    spec: &JoinSpec,
    out_schema: &EdfSchema,
) -> Result<EstimateBatch> {
    let left_keys = spec.left_columns();
    let mut probe_rows = Vec::new();
    let mut build_rows: Vec<Option<usize>> = Vec::new();
    for row in 0..probe.row_count() {
        let key = probe.rows.key_of_row(&left_keys, row)?;
        match (index.lookup(&key), spec.join_type) {
            (Some(b), _) => {
                probe_rows.push(row);
                build_rows.push(Some(b));
            }
            (None, JoinType::Left) => {
                probe_rows.push(row);
                build_rows.push(None);
            }
            (None, JoinType::Inner) => {}
        }
    }
    let left_part = probe.take(&probe_rows);
    assemble_join_output(out_schema, left_part, &index.batch, &build_rows, probe.progress)
}

/// Stitches a selected left part with per-row build matches into the
/// output schema's column order.
fn assemble_join_output(
    out_schema: &EdfSchema,
    left_part: EstimateBatch,
    right_batch: &RowBatch,
    right_rows: &[Option<usize>],
    progress: Progress,
) -> Result<EstimateBatch> {
    let left_schema = &left_part.rows.schema;
    let n = left_part.row_count();
    debug_assert_eq!(n, right_rows.len());

    let mut columns = Vec::with_capacity(out_schema.attributes.len());
    let mut uncertainty = Uncertainty::empty();
    for attr in &out_schema.attributes {
        if let Some(idx) = left_schema.attribute_index(&attr.name) {
            columns.push(left_part.rows.columns[idx].clone());
            continue;
        }
        if attr.name == MATCH_FLAG_COLUMN && right_batch.schema.attribute(MATCH_FLAG_COLUMN).is_none() {
            columns.push(Column::Int64(
                right_rows.iter().map(|m| i64::from(m.is_some())).collect(),
            ));
            continue;
        }
        let ridx = right_batch
            .schema
            .attribute_index(&attr.name)
            .expect("join output column comes from one side");
        let mut col = Column::empty(attr.value_kind);
        for m in right_rows {
            let v = match m {
                Some(row) => right_batch.columns[ridx].value(*row),
                None => default_value(attr.value_kind),
            };
            col.push(v)?;
        }
        columns.push(col);
        if attr.mutability == Mutability::Mutable {
            uncertainty.vars.insert(attr.name.clone(), vec![VarCell::exact(); n]);
        }
    }
    for (k, v) in &left_part.uncertainty.vars {
        uncertainty.vars.insert(k.clone(), v.clone());
    }
    for (k, v) in &left_part.uncertainty.cross {
        uncertainty.cross.insert(k.clone(), v.clone());
    }
    let rows = RowBatch::new(out_schema.clone(), columns)?;
    EstimateBatch::new(rows, progress, uncertainty)
}

#[derive(Debug)]
struct SideBuf {
    schema: EdfSchema,
    key_columns: Vec<String>,
    unique: bool,
    batches: Vec<EstimateBatch>,
    /// (key, batch index, row index) in global key order, not yet retired
    pending: std::collections::VecDeque<(Key, usize, usize)>,
    max_key: Option<Key>,
    progress: Progress,
    done: bool,
}

impl SideBuf {
    fn new(schema: EdfSchema, key_columns: Vec<String>, unique: bool) -> Self {
        SideBuf {
            schema,
            key_columns,
            unique,
            batches: Vec::new(),
            pending: std::collections::VecDeque::new(),
            max_key: None,
            progress: Progress::start(1),
            done: false,
        }
    }

    fn push(&mut self, batch: EstimateBatch, side_name: &str) -> Result<()> {
        if self.done {
            return Err(Error::Exec(format!("{side_name} side received data after close")));
        }
        let idx = self.batches.len();
        for row in 0..batch.row_count() {
            let key = batch.rows.key_of_row(&self.key_columns, row)?;
            if let Some(max) = &self.max_key {
                let ok = if self.unique { key > *max } else { key >= *max };
                if !ok {
                    return Err(Error::Exec(format!(
                        "{side_name} side violates the ordered-partition contract: key {key:?} arrived after {max:?}"
                    )));
                }
            }
            self.max_key = Some(key.clone());
            self.pending.push_back((key, idx, row));
        }
        self.progress = batch.progress;
        self.batches.push(batch);
        Ok(())
    }

    fn close(&mut self) {
        self.done = true;
        self.progress = Progress::final_over(self.progress.total);
    }

    /// Pops rows whose key is strictly below the joint watermark; a `None`
    /// watermark (both streams closed) pops everything. The watermark must
    /// be shared across sides so matching rows retire together.
    fn retire(&mut self, watermark: Option<&Key>) -> Vec<(Key, usize, usize)> {
        let mut out = Vec::new();
        loop {
            let eligible = match self.pending.front() {
                None => false,
                Some((key, _, _)) => watermark.map_or(true, |wm| key < wm),
            };
            if !eligible {
                break;
            }
            out.push(self.pending.pop_front().unwrap());
        }
        out
    }
}

/// Streaming merge join over two key-ordered inputs. Every emission is a
/// key-disjoint delta; the final flush (always emitted, possibly empty)
/// carries t = 1.
#[derive(Debug)]
pub struct MergeJoin {
    spec: JoinSpec,
    out_schema: EdfSchema,
    left: SideBuf,
    right: SideBuf,
    flushed: bool,
}

impl MergeJoin {
    pub fn new(left: &EdfSchema, right: &EdfSchema, spec: JoinSpec) -> Result<Self> {
        let out_schema = join_output_schema(left, right, &spec, JoinMethod::Merge)?;
        Ok(MergeJoin {
            out_schema,
            left: SideBuf::new(left.clone(), spec.left_columns(), false),
            right: SideBuf::new(right.clone(), spec.right_columns(), true),
            spec,
            flushed: false,
        })
    }

    pub fn output_schema(&self) -> &EdfSchema {
        &self.out_schema
    }

    /// Input side to read next for deterministic scheduling: the side
    /// with the smaller max key is the one holding back the watermark.
    pub fn wants(&self) -> usize {
        if self.left.done {
            return 1;
        }
        if self.right.done {
            return 0;
        }
        match (&self.left.max_key, &self.right.max_key) {
            (None, _) => 0,
            (_, None) => 1,
            (Some(l), Some(r)) => usize::from(l > r),
        }
    }

    pub fn push(&mut self, side: usize, batch: EstimateBatch) -> Result<Vec<EstimateBatch>> {
        match side {
            0 => self.left.push(batch, "left")?,
            1 => self.right.push(batch, "right")?,
            _ => return Err(Error::Exec("merge join has two inputs".into())),
        }
        self.emit_ready()
    }

    pub fn close(&mut self, side: usize) -> Result<Vec<EstimateBatch>> {
        match side {
            0 => self.left.close(),
            1 => self.right.close(),
            _ => return Err(Error::Exec("merge join has two inputs".into())),
        }
        let mut out = self.emit_ready()?;
        if self.left.done && self.right.done && !self.flushed {
            self.flushed = true;
            // the t = 1 signal must flow even when the flush joins nothing
            if out.last().map(|b| b.progress.is_final()) != Some(true) {
                let empty = EstimateBatch::exact(
                    RowBatch::empty(self.out_schema.clone()),
                    Progress::final_over(self.progress().total),
                );
                out.push(empty);
            }
        }
        Ok(out)
    }

    fn progress(&self) -> Progress {
        self.left.progress.min(self.right.progress)
    }

    fn emit_ready(&mut self) -> Result<Vec<EstimateBatch>> {
        let watermark = match (self.left.done, self.right.done) {
            (true, true) => None,
            (true, false) => self.right.max_key.clone(),
            (false, true) => self.left.max_key.clone(),
            (false, false) => match (&self.left.max_key, &self.right.max_key) {
                (Some(l), Some(r)) => Some(l.min(r).clone()),
                _ => return Ok(Vec::new()),
            },
        };
        let left_ready = self.left.retire(watermark.as_ref());
        let right_ready = self.right.retire(watermark.as_ref());
        if left_ready.is_empty() && right_ready.is_empty() {
            return Ok(Vec::new());
        }

        // the right side is unique per key: index the retired run
        let right_map: HashMap<&Key, (usize, usize)> =
            right_ready.iter().map(|(k, b, r)| (k, (*b, *r))).collect();

        let mut keep = Vec::new();
        let mut matches: Vec<Option<(usize, usize)>> = Vec::new();
        for (key, b, r) in &left_ready {
            match (right_map.get(key), self.spec.join_type) {
                (Some(m), _) => {
                    keep.push((*b, *r));
                    matches.push(Some(*m));
                }
                (None, JoinType::Left) => {
                    keep.push((*b, *r));
                    matches.push(None);
                }
                (None, JoinType::Inner) => {}
            }
        }
        if keep.is_empty() {
            return Ok(Vec::new());
        }

        // gather the kept left rows (they retire in key order)
        let parts: Vec<EstimateBatch> = {
            let mut parts = Vec::new();
            let mut i = 0;
            while i < keep.len() {
                let batch = keep[i].0;
                let mut idx = Vec::new();
                while i < keep.len() && keep[i].0 == batch {
                    idx.push(keep[i].1);
                    i += 1;
                }
                parts.push(self.left.batches[batch].take(&idx));
            }
            parts
        };
        let left_rows = RowBatch::concat(
            self.left.schema.clone(),
            &parts.iter().map(|p| &p.rows).collect::<Vec<_>>(),
        )?;
        let left_unc =
            Uncertainty::concat(&parts.iter().map(|p| &p.uncertainty).collect::<Vec<_>>())?;
        let left_part = EstimateBatch { rows: left_rows, progress: self.progress(), uncertainty: left_unc };

        // right rows resolve against a transient single-batch view per row
        let right_batches = &self.right.batches;
        let mut right_concat_rows: Vec<Option<usize>> = Vec::with_capacity(matches.len());
        // flatten matched right rows into one gathered batch first
        let mut gather_idx: Vec<(usize, usize)> = Vec::new();
        for m in &matches {
            match m {
                Some((b, r)) => {
                    gather_idx.push((*b, *r));
                    right_concat_rows.push(Some(gather_idx.len() - 1));
                }
                None => right_concat_rows.push(None),
            }
        }
        let gathered_right: RowBatch = {
            let mut parts: Vec<RowBatch> = Vec::new();
            let mut i = 0;
            while i < gather_idx.len() {
                let batch = gather_idx[i].0;
                let mut idx = Vec::new();
                while i < gather_idx.len() && gather_idx[i].0 == batch {
                    idx.push(gather_idx[i].1);
                    i += 1;
                }
                parts.push(right_batches[batch].rows.take(&idx));
            }
            RowBatch::concat(self.right.schema.clone(), &parts.iter().collect::<Vec<_>>())?
        };

        let progress = left_part.progress;
        let out = assemble_join_output(
            &self.out_schema,
            left_part,
            &gathered_right,
            &right_concat_rows,
            progress,
        )?;
        Ok(vec![out])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fact_schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("sale", ValueKind::Int64),
                AttributeDef::constant("cat", ValueKind::Int64),
                AttributeDef::constant("amount", ValueKind::Float64),
            ],
            vec!["sale".into()],
            Some(vec!["cat".into()]),
        )
        .unwrap()
    }

    fn dim_schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("cat_id", ValueKind::Int64),
                AttributeDef::constant("flag", ValueKind::Float64),
            ],
            vec!["cat_id".into()],
            Some(vec!["cat_id".into()]),
        )
        .unwrap()
    }

    fn spec(join_type: JoinType) -> JoinSpec {
        JoinSpec { keys: vec![("cat".into(), "cat_id".into())], join_type }
    }

    fn fact_batch(rows: &[(i64, i64, f64)], progress: Progress) -> EstimateBatch {
        let sale: Vec<i64> = rows.iter().map(|r| r.0).collect();
        let cat: Vec<i64> = rows.iter().map(|r| r.1).collect();
        let amount: Vec<f64> = rows.iter().map(|r| r.2).collect();
        EstimateBatch::exact(
            RowBatch::new(
                fact_schema(),
                vec![Column::Int64(sale), Column::Int64(cat), Column::Float64(amount)],
            )
            .unwrap(),
            progress,
        )
    }

    fn dim_batch(rows: &[(i64, f64)], progress: Progress) -> EstimateBatch {
        EstimateBatch::exact(
            RowBatch::new(
                dim_schema(),
                vec![
                    Column::Int64(rows.iter().map(|r| r.0).collect()),
                    Column::Float64(rows.iter().map(|r| r.1).collect()),
                ],
            )
            .unwrap(),
            progress,
        )
    }

    fn sort_rows(rows: &mut [(i64, i64, f64, f64, i64)]) {
        rows.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in test rows"));
    }

    /// Independent oracle: all-pairs nested loop.
    fn nested_loop(
        fact: &[(i64, i64, f64)],
        dim: &[(i64, f64)],
        join_type: JoinType,
    ) -> Vec<(i64, i64, f64, f64, i64)> {
        let mut out = Vec::new();
        for f in fact {
            let m = dim.iter().find(|d| d.0 == f.1);
            match (m, join_type) {
                (Some(d), _) => out.push((f.0, f.1, f.2, d.1, 1)),
                (None, JoinType::Left) => out.push((f.0, f.1, f.2, 0.0, 0)),
                (None, JoinType::Inner) => {}
            }
        }
        sort_rows(&mut out);
        out
    }

    fn rows_of(batch: &EstimateBatch, left_join: bool) -> Vec<(i64, i64, f64, f64, i64)> {
        let mut out = Vec::new();
        for row in 0..batch.row_count() {
            let get = |name: &str| batch.rows.column(name).unwrap().value(row);
            let sale = match get("sale") {
                Value::Int64(v) => v,
                _ => unreachable!(),
            };
            let cat = match get("cat") {
                Value::Int64(v) => v,
                _ => unreachable!(),
            };
            let amount = match get("amount") {
                Value::Float64(v) => v,
                _ => unreachable!(),
            };
            let flag = match get("flag") {
                Value::Float64(v) => v,
                _ => unreachable!(),
            };
            let matched = if left_join {
                match get(MATCH_FLAG_COLUMN) {
                    Value::Int64(v) => v,
                    _ => unreachable!(),
                }
            } else {
                1
            };
            out.push((sale, cat, amount, flag, matched));
        }
        sort_rows(&mut out);
        out
    }

    #[test]
    fn output_schema_drops_right_key_and_validates() {
        let s = join_output_schema(&fact_schema(), &dim_schema(), &spec(JoinType::Inner), JoinMethod::Hash)
            .unwrap();
        assert!(s.attribute("cat_id").is_none());
        assert_eq!(s.primary_key, vec!["sale".to_string()]);
        assert_eq!(s.clustering_key, Some(vec!["cat".to_string()]));
        let s = join_output_schema(&fact_schema(), &dim_schema(), &spec(JoinType::Left), JoinMethod::Merge)
            .unwrap();
        assert!(s.attribute(MATCH_FLAG_COLUMN).is_some());
        assert_eq!(s.clustering_key, Some(vec!["cat".to_string()]));

        // a dim keyed on something other than the join key is rejected
        let bad_dim = EdfSchema::new(
            vec![
                AttributeDef::constant("cat_id", ValueKind::Int64),
                AttributeDef::constant("other", ValueKind::Int64),
            ],
            vec!["other".into()],
            None,
        )
        .unwrap();
        assert!(join_output_schema(&fact_schema(), &bad_dim, &spec(JoinType::Inner), JoinMethod::Hash)
            .is_err());
    }

    #[test]
    fn hash_join_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for join_type in [JoinType::Inner, JoinType::Left] {
            for _ in 0..25 {
                let n_dim = rng.random_range(0..8usize);
                let dim: Vec<(i64, f64)> =
                    (0..n_dim).map(|i| (i as i64, rng.random_range(-3.0..3.0))).collect();
                let n_fact = rng.random_range(0..30usize);
                let fact: Vec<(i64, i64, f64)> = (0..n_fact)
                    .map(|i| {
                        (i as i64, rng.random_range(0..10), rng.random_range(-5.0..5.0))
                    })
                    .collect();

                let schema =
                    join_output_schema(&fact_schema(), &dim_schema(), &spec(join_type), JoinMethod::Hash)
                        .unwrap();
                let index =
                    BuiltIndex::new(dim_batch(&dim, Progress::final_over(1)).rows, vec!["cat_id".into()])
                        .unwrap();
                let out = hash_join(
                    &fact_batch(&fact, Progress::new(1, 2)),
                    &index,
                    &spec(join_type),
                    &schema,
                )
                .unwrap();
                assert_eq!(
                    rows_of(&out, join_type == JoinType::Left),
                    nested_loop(&fact, &dim, join_type)
                );
                assert_eq!(out.progress, Progress::new(1, 2));
            }
        }
    }

    #[test]
    fn duplicate_build_keys_are_rejected() {
        let batch = dim_batch(&[(1, 0.0), (1, 1.0)], Progress::final_over(1));
        assert!(BuiltIndex::new(batch.rows, vec!["cat_id".into()]).is_err());
    }

    #[test]
    fn merge_join_streams_disjoint_deltas() {
        let spec = spec(JoinType::Inner);
        let mut mj = MergeJoin::new(&fact_schema(), &dim_schema(), spec).unwrap();

        // left rows clustered by cat, in two partials
        let mut emitted = Vec::new();
        emitted.extend(
            mj.push(0, fact_batch(&[(1, 1, 10.0), (2, 1, 11.0), (3, 2, 12.0)], Progress::new(1, 2)))
                .unwrap(),
        );
        emitted.extend(mj.push(1, dim_batch(&[(1, 0.5), (2, 0.25)], Progress::new(1, 2))).unwrap());
        // watermark is min(cat 2, cat_id 2): only cat 1 retires
        let so_far: usize = emitted.iter().map(|b| b.row_count()).sum();
        assert_eq!(so_far, 2);

        emitted
            .extend(mj.push(0, fact_batch(&[(4, 2, 13.0), (5, 4, 14.0)], Progress::new(2, 2))).unwrap());
        emitted.extend(mj.push(1, dim_batch(&[(4, 0.125)], Progress::new(2, 2))).unwrap());
        emitted.extend(mj.close(0).unwrap());
        let fin = mj.close(1).unwrap();
        assert!(!fin.is_empty());
        emitted.extend(fin);

        // the last emission carries t = 1
        assert!(emitted.last().unwrap().progress.is_final());

        // deltas are key-disjoint and their union matches the oracle
        let mut seen_keys = std::collections::HashSet::new();
        for batch in &emitted {
            let mut batch_keys = std::collections::HashSet::new();
            for row in 0..batch.row_count() {
                batch_keys.insert(batch.rows.key_of_row(&["cat".into()], row).unwrap());
            }
            for k in batch_keys {
                assert!(seen_keys.insert(k), "key emitted twice across deltas");
            }
        }
        let mut all = Vec::new();
        for batch in &emitted {
            all.extend(rows_of(batch, false));
        }
        sort_rows(&mut all);
        let fact = [(1, 1, 10.0), (2, 1, 11.0), (3, 2, 12.0), (4, 2, 13.0), (5, 4, 14.0)];
        let dim = [(1, 0.5), (2, 0.25), (4, 0.125)];
        assert_eq!(all, nested_loop(&fact, &dim, JoinType::Inner));
    }

    #[test]
    fn merge_join_left_fills_defaults_at_flush() {
        let mut mj = MergeJoin::new(&fact_schema(), &dim_schema(), spec(JoinType::Left)).unwrap();
        let mut emitted = Vec::new();
        emitted
            .extend(mj.push(0, fact_batch(&[(1, 1, 10.0), (2, 3, 11.0)], Progress::new(1, 1))).unwrap());
        emitted.extend(mj.push(1, dim_batch(&[(1, 0.5)], Progress::new(1, 1))).unwrap());
        emitted.extend(mj.close(0).unwrap());
        emitted.extend(mj.close(1).unwrap());
        let mut all = Vec::new();
        for batch in &emitted {
            all.extend(rows_of(batch, true));
        }
        sort_rows(&mut all);
        assert_eq!(all, vec![(1, 1, 10.0, 0.5, 1), (2, 3, 11.0, 0.0, 0)]);
    }

    #[test]
    fn merge_join_flushes_empty_final_delta() {
        let mut mj = MergeJoin::new(&fact_schema(), &dim_schema(), spec(JoinType::Inner)).unwrap();
        assert!(mj.close(0).unwrap().is_empty());
        let fin = mj.close(1).unwrap();
        assert_eq!(fin.len(), 1);
        assert_eq!(fin[0].row_count(), 0);
        assert!(fin[0].progress.is_final());
    }

    #[test]
    fn merge_join_rejects_out_of_order_keys() {
        let mut mj = MergeJoin::new(&fact_schema(), &dim_schema(), spec(JoinType::Inner)).unwrap();
        mj.push(0, fact_batch(&[(1, 5, 1.0)], Progress::new(1, 2))).unwrap();
        let err = mj.push(0, fact_batch(&[(2, 3, 1.0)], Progress::new(2, 2)));
        assert!(err.is_err());

        // duplicate keys on the unique (right) side are also a violation
        let mut mj = MergeJoin::new(&fact_schema(), &dim_schema(), spec(JoinType::Inner)).unwrap();
        mj.push(1, dim_batch(&[(3, 0.0)], Progress::new(1, 2))).unwrap();
        assert!(mj.push(1, dim_batch(&[(3, 0.0)], Progress::new(2, 2))).is_err());
    }

    #[test]
    fn wants_tracks_the_lagging_side() {
        let mut mj = MergeJoin::new(&fact_schema(), &dim_schema(), spec(JoinType::Inner)).unwrap();
        assert_eq!(mj.wants(), 0);
        mj.push(0, fact_batch(&[(1, 5, 1.0)], Progress::new(1, 2))).unwrap();
        assert_eq!(mj.wants(), 1, "left is ahead, read right");
        mj.push(1, dim_batch(&[(2, 0.0)], Progress::new(1, 2))).unwrap();
        assert_eq!(mj.wants(), 1, "right max 2 still behind left max 5");
        mj.close(1).unwrap();
        assert_eq!(mj.wants(), 0);
    }
}
