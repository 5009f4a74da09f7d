//! Snapshot stream files. The stream is line-oriented CSV where the first
//! field of each record is a tag:
//!
//! ```text
//! schema,cat:int64:constant,n:float64:mutable
//! key,cat
//! snapshot,0,3/10,2
//! row,0,2.5
//! ci,n,1.25,3.75,0.95
//! snapshot,1,5/10,4
//! ...
//! ```
//!
//! One `schema` and one `key` record lead the file (the schema never
//! changes mid-stream). Each snapshot block starts with
//! `snapshot,<index>,<done>/<total>,<wall_ms>` and lists its rows sorted
//! by primary key, so two runs of the same query produce diffable streams;
//! the wall-clock field is informational and excluded from that contract.
//! A `ci` record attaches a confidence interval to one column of the row
//! above it. Floats are written in shortest round-trip form, so values
//! (including infinities) survive a write/read cycle exactly.

use std::time::Duration;

use indexmap::IndexMap;

use crate::confidence::ConfidenceInterval;
use crate::edf::{AttributeDef, Column, EdfSchema, Mutability, Progress, RowBatch, ValueKind};
use crate::exec::SnapshotRecord;
use crate::{Error, Result};

fn fields_to_line(fields: &[String]) -> String {
    let quoted: Vec<String> = fields
        .iter()
        .map(|f| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect();
    quoted.join(",")
}

fn f64_field(v: f64) -> String {
    format!("{v:?}")
}

/// The schema and key records leading a stream.
pub fn write_header(schema: &EdfSchema) -> String {
    let mut out = String::new();
    let mut fields = vec!["schema".to_string()];
    for attr in &schema.attributes {
        fields.push(format!(
            "{}:{}:{}",
            attr.name,
            attr.value_kind.name(),
            attr.mutability.name()
        ));
    }
    out.push_str(&fields_to_line(&fields));
    out.push('\n');

    let mut fields = vec!["key".to_string()];
    fields.extend(schema.primary_key.iter().cloned());
    out.push_str(&fields_to_line(&fields));
    out.push('\n');
    out
}

/// One snapshot block. Rows are emitted sorted by primary key; the
/// confidence-interval vectors are permuted in step with the rows they
/// describe.
pub fn write_snapshot(snap: &SnapshotRecord) -> Result<String> {
    let batch = &snap.rows;
    let pk = &batch.schema.primary_key;
    let mut order: Vec<usize> = (0..batch.row_count()).collect();
    if !pk.is_empty() {
        let mut keys = Vec::with_capacity(order.len());
        for row in 0..batch.row_count() {
            keys.push(batch.key_of_row(pk, row)?);
        }
        order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    }

    let mut out = String::new();
    out.push_str(&fields_to_line(&[
        "snapshot".to_string(),
        snap.snapshot_index.to_string(),
        format!("{}/{}", snap.t.done, snap.t.total),
        snap.wall_clock.as_millis().to_string(),
    ]));
    out.push('\n');

    for &row in &order {
        let mut fields = vec!["row".to_string()];
        for col in &batch.columns {
            fields.push(match col {
                Column::Int64(v) => v[row].to_string(),
                Column::Float64(v) => f64_field(v[row]),
                Column::Utf8(v) => v[row].clone(),
            });
        }
        out.push_str(&fields_to_line(&fields));
        out.push('\n');

        if let Some(ci) = &snap.ci {
            for (column, intervals) in ci {
                let interval = intervals[row];
                out.push_str(&fields_to_line(&[
                    "ci".to_string(),
                    column.clone(),
                    f64_field(interval.lo),
                    f64_field(interval.hi),
                    f64_field(interval.level),
                ]));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// A deserialized stream: the run's output schema and its snapshots.
#[derive(Debug, Clone)]
pub struct SnapshotStream {
    pub schema: EdfSchema,
    pub snapshots: Vec<SnapshotRecord>,
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Ingest(format!("snapshot stream line {line}: {}", msg.into()))
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| bad(line, format!("`{field}` is not a number")))
}

struct BlockBuilder {
    index: usize,
    t: Progress,
    wall: Duration,
    columns: Vec<Column>,
    ci: IndexMap<String, Vec<ConfidenceInterval>>,
    rows: usize,
}

impl BlockBuilder {
    fn finish(self, schema: &EdfSchema, line: usize) -> Result<SnapshotRecord> {
        for (column, intervals) in &self.ci {
            if intervals.len() != self.rows {
                return Err(bad(
                    line,
                    format!(
                        "column {column} has {} intervals for {} rows",
                        intervals.len(),
                        self.rows
                    ),
                ));
            }
        }
        Ok(SnapshotRecord {
            snapshot_index: self.index,
            t: self.t,
            wall_clock: self.wall,
            rows: RowBatch::new(schema.clone(), self.columns)?,
            ci: if self.ci.is_empty() { None } else { Some(self.ci) },
        })
    }
}

/// Parses a stream produced by [`write_header`] and [`write_snapshot`].
pub fn read_snapshots(text: &str) -> Result<SnapshotStream> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut attrs: Option<Vec<AttributeDef>> = None;
    let mut pk: Option<Vec<String>> = None;
    let mut schema: Option<EdfSchema> = None;
    let mut snapshots = Vec::new();
    let mut block: Option<BlockBuilder> = None;
    let mut line = 0;

    for record in reader.records() {
        line += 1;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        let fields: Vec<&str> = record.iter().collect();
        let [tag, rest @ ..] = fields.as_slice() else { continue };

        match *tag {
            "schema" => {
                let parsed = rest
                    .iter()
                    .map(|f| {
                        let parts: Vec<&str> = f.split(':').collect();
                        let [name, kind, mutability] = parts.as_slice() else {
                            return Err(bad(line, format!("bad schema field `{f}`")));
                        };
                        Ok(AttributeDef::new(
                            *name,
                            ValueKind::parse(kind).map_err(|e| bad(line, e.to_string()))?,
                            Mutability::parse(mutability).map_err(|e| bad(line, e.to_string()))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                attrs = Some(parsed);
            }
            "key" => {
                pk = Some(rest.iter().map(|s| s.to_string()).collect());
            }
            "snapshot" => {
                let schema = match &schema {
                    Some(s) => s,
                    None => {
                        let attrs = attrs
                            .take()
                            .ok_or_else(|| bad(line, "snapshot before schema record"))?;
                        let pk =
                            pk.take().ok_or_else(|| bad(line, "snapshot before key record"))?;
                        schema = Some(
                            EdfSchema::new(attrs, pk, None)
                                .map_err(|e| bad(line, e.to_string()))?,
                        );
                        schema.as_ref().unwrap()
                    }
                };
                if let Some(done) = block.take() {
                    snapshots.push(done.finish(schema, line)?);
                }
                let [index, t, wall] = rest else {
                    return Err(bad(line, "expected snapshot,<index>,<done>/<total>,<wall_ms>"));
                };
                let (done, total) = t
                    .split_once('/')
                    .ok_or_else(|| bad(line, format!("bad progress `{t}`")))?;
                let (done, total) = (
                    done.parse::<u64>().map_err(|_| bad(line, "bad progress"))?,
                    total.parse::<u64>().map_err(|_| bad(line, "bad progress"))?,
                );
                if done > total {
                    return Err(bad(line, format!("progress {done}/{total} exceeds 1")));
                }
                block = Some(BlockBuilder {
                    index: index.parse().map_err(|_| bad(line, "bad snapshot index"))?,
                    t: Progress::new(done, total),
                    wall: Duration::from_millis(
                        wall.parse().map_err(|_| bad(line, "bad wall_ms"))?,
                    ),
                    columns: schema
                        .attributes
                        .iter()
                        .map(|a| Column::empty(a.value_kind))
                        .collect(),
                    ci: IndexMap::new(),
                    rows: 0,
                });
            }
            "row" => {
                let block =
                    block.as_mut().ok_or_else(|| bad(line, "row outside a snapshot block"))?;
                let schema = schema.as_ref().unwrap();
                if rest.len() != schema.attributes.len() {
                    return Err(bad(
                        line,
                        format!(
                            "row has {} fields, schema has {}",
                            rest.len(),
                            schema.attributes.len()
                        ),
                    ));
                }
                for (field, col) in rest.iter().zip(&mut block.columns) {
                    match col {
                        Column::Int64(v) => v.push(
                            field
                                .parse()
                                .map_err(|_| bad(line, format!("`{field}` is not an int64")))?,
                        ),
                        Column::Float64(v) => v.push(parse_f64(field, line)?),
                        Column::Utf8(v) => v.push(field.to_string()),
                    }
                }
                block.rows += 1;
            }
            "ci" => {
                let block =
                    block.as_mut().ok_or_else(|| bad(line, "ci outside a snapshot block"))?;
                let [column, lo, hi, level] = rest else {
                    return Err(bad(line, "expected ci,<column>,<lo>,<hi>,<level>"));
                };
                let entry = block.ci.entry(column.to_string()).or_default();
                if entry.len() != block.rows.saturating_sub(1) {
                    return Err(bad(line, format!("ci for {column} does not follow its row")));
                }
                entry.push(ConfidenceInterval {
                    lo: parse_f64(lo, line)?,
                    hi: parse_f64(hi, line)?,
                    level: parse_f64(level, line)?,
                });
            }
            other => return Err(bad(line, format!("unknown record tag `{other}`"))),
        }
    }

    let schema = schema.ok_or_else(|| Error::Ingest("snapshot stream has no snapshots".into()))?;
    if let Some(done) = block.take() {
        snapshots.push(done.finish(&schema, line)?);
    }
    Ok(SnapshotStream { schema, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::Value;

    fn demo_schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("cat", ValueKind::Utf8),
                AttributeDef::mutable("n", ValueKind::Float64),
                AttributeDef::mutable("peak", ValueKind::Int64),
            ],
            vec!["cat".into()],
            None,
        )
        .unwrap()
    }

    fn demo_snapshot(index: usize, done: u64) -> SnapshotRecord {
        let rows = RowBatch::new(
            demo_schema(),
            vec![
                Column::Utf8(vec!["b,comma".into(), "a".into()]),
                Column::Float64(vec![2.5, f64::INFINITY]),
                Column::Int64(vec![7, -1]),
            ],
        )
        .unwrap();
        let ci = IndexMap::from([(
            "n".to_string(),
            vec![
                ConfidenceInterval { lo: 1.25, hi: 3.75, level: 0.95 },
                ConfidenceInterval { lo: f64::NEG_INFINITY, hi: f64::INFINITY, level: 0.95 },
            ],
        )]);
        SnapshotRecord {
            snapshot_index: index,
            t: Progress::new(done, 10),
            wall_clock: Duration::from_millis(12 + index as u64),
            rows,
            ci: Some(ci),
        }
    }

    #[test]
    fn stream_round_trips_exactly() {
        let mut text = write_header(&demo_schema());
        text.push_str(&write_snapshot(&demo_snapshot(0, 3)).unwrap());
        text.push_str(&write_snapshot(&demo_snapshot(1, 10)).unwrap());

        let stream = read_snapshots(&text).unwrap();
        assert_eq!(stream.schema, demo_schema());
        assert_eq!(stream.snapshots.len(), 2);

        let snap = &stream.snapshots[0];
        assert_eq!(snap.snapshot_index, 0);
        assert_eq!(snap.t, Progress::new(3, 10));
        assert_eq!(snap.wall_clock, Duration::from_millis(12));

        // rows come back sorted by key: "a" first, including its infinities
        assert_eq!(snap.rows.value(0, 0), Value::Utf8("a".into()));
        assert_eq!(snap.rows.value(1, 0), Value::Float64(f64::INFINITY));
        assert_eq!(snap.rows.value(0, 1), Value::Utf8("b,comma".into()));
        assert_eq!(snap.rows.value(2, 1), Value::Int64(7));
        let ci = snap.ci.as_ref().unwrap();
        assert_eq!(ci["n"][0].lo, f64::NEG_INFINITY);
        assert_eq!(ci["n"][1].hi, 3.75);
    }

    #[test]
    fn equal_runs_differ_only_in_wall_clock_fields() {
        let mut a = demo_snapshot(0, 3);
        let mut b = demo_snapshot(0, 3);
        a.wall_clock = Duration::from_millis(5);
        b.wall_clock = Duration::from_millis(900);
        let text_a = write_snapshot(&a).unwrap();
        let text_b = write_snapshot(&b).unwrap();
        let diff: Vec<(&str, &str)> = text_a
            .lines()
            .zip(text_b.lines())
            .filter(|(x, y)| x != y)
            .collect();
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("snapshot,"), "only the snapshot line may differ");
    }

    #[test]
    fn scalar_rows_without_keys_round_trip() {
        let schema =
            EdfSchema::new(vec![AttributeDef::mutable("total", ValueKind::Float64)], vec![], None)
                .unwrap();
        let snap = SnapshotRecord {
            snapshot_index: 0,
            t: Progress::new(1, 1),
            wall_clock: Duration::ZERO,
            rows: RowBatch::new(schema.clone(), vec![Column::Float64(vec![42.0])]).unwrap(),
            ci: None,
        };
        let mut text = write_header(&schema);
        text.push_str(&write_snapshot(&snap).unwrap());
        let stream = read_snapshots(&text).unwrap();
        assert_eq!(stream.schema.primary_key, Vec::<String>::new());
        assert_eq!(stream.snapshots[0].rows.value(0, 0), Value::Float64(42.0));
        assert_eq!(stream.snapshots[0].ci, None);
    }

    #[test]
    fn malformed_streams_are_rejected() {
        let header = write_header(&demo_schema());
        let cases = [
            (format!("{header}row,a,1.0,2\n"), "row outside a snapshot block"),
            (format!("{header}snapshot,0,3/2,1\n"), "exceeds 1"),
            (format!("{header}snapshot,0,3/10,1\nrow,a,1.0\n"), "row has 2 fields"),
            (format!("{header}snapshot,0,3/10,1\nrow,a,x,2\n"), "is not a number"),
            (
                format!("{header}snapshot,0,3/10,1\nrow,a,1.0,2\nci,n,1,2,0.95\nci,n,1,2,0.95\n"),
                "does not follow its row",
            ),
            ("snapshot,0,1/2,1\n".to_string(), "before schema record"),
        ];
        for (text, needle) in cases {
            let err = read_snapshots(&text).unwrap_err().to_string();
            assert!(err.contains(needle), "expected {needle:?} in {err:?}");
        }
    }
}
