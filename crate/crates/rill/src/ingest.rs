//! Partitioned table loading: metadata, per-partition CSV reads with
//! cumulative progress, and deterministic partition-order shuffles.
//!
//! A table is a directory holding a `meta` file and one CSV file per
//! partition. The meta file is line-based `key=value`:
//!
//! ```text
//! table=sales
//! column=id:int64:constant
//! column=cat:utf8:constant
//! column=amount:float64:constant
//! primary_key=id
//! clustering_key=cat
//! partition=part-00000.csv:1000
//! ```
//!
//! Partition files carry a header row naming the columns in schema order.
//! Declared row counts are trusted until a partition is actually read, at
//! which point a mismatch is an error.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::edf::{AttributeDef, Column, EdfSchema, Mutability, Progress, RowBatch, ValueKind};
use crate::error::Error;
use crate::exec::BoundTable;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMeta {
    /// File name relative to the table directory.
    pub file: String,
    pub row_count: u64,
}

/// A table's metadata: everything needed to plan against it and to read
/// its partitions lazily.
#[derive(Debug, Clone)]
pub struct TableMeta {
    pub name: String,
    pub dir: PathBuf,
    pub schema: EdfSchema,
    pub partitions: Vec<PartitionMeta>,
}

impl TableMeta {
    pub fn total_rows(&self) -> u64 {
        self.partitions.iter().map(|p| p.row_count).sum()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let msg = format!("{}: {e}", path.display());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        _ => Error::Ingest(msg),
    }
}

fn split_list(value: &str) -> Vec<String> {
    if value.is_empty() {
        Vec::new()
    } else {
        value.split(',').map(|s| s.trim().to_string()).collect()
    }
}

/// Reads and validates `<dir>/meta`. Base tables must declare at least one
/// primary-key column and a positive row count for every partition.
pub fn load_meta(dir: impl AsRef<Path>) -> Result<TableMeta> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| {
        Error::Ingest(format!("cannot read {}: {e}", meta_path.display()))
    })?;

    let mut name: Option<String> = None;
    let mut attributes: Vec<AttributeDef> = Vec::new();
    let mut primary_key: Option<Vec<String>> = None;
    let mut clustering_key: Option<Vec<String>> = None;
    let mut partitions: Vec<PartitionMeta> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Ingest(format!("{}:{}: {msg}", meta_path.display(), lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
        match key {
            "table" => {
                if name.replace(value.to_string()).is_some() {
                    return Err(at("table declared twice".into()));
                }
            }
            "column" => {
                let parts: Vec<&str> = value.split(':').collect();
                let [col, kind, mutability] = parts.as_slice() else {
                    return Err(at(format!("expected column=name:type:mutability, got `{value}`")));
                };
                let kind = ValueKind::parse(kind)
                    .map_err(|_| at(format!("unknown column type `{kind}`")))?;
                let mutability = Mutability::parse(mutability)
                    .map_err(|_| at(format!("unknown mutability `{mutability}`")))?;
                attributes.push(AttributeDef::new(*col, kind, mutability));
            }
            "primary_key" => {
                if primary_key.replace(split_list(value)).is_some() {
                    return Err(at("primary_key declared twice".into()));
                }
            }
            "clustering_key" => {
                if clustering_key.replace(split_list(value)).is_some() {
                    return Err(at("clustering_key declared twice".into()));
                }
            }
            "partition" => {
                let (file, rows) = value
                    .rsplit_once(':')
                    .ok_or_else(|| at(format!("expected partition=file:rows, got `{value}`")))?;
                let row_count: u64 = rows
                    .parse()
                    .map_err(|_| at(format!("bad row count `{rows}`")))?;
                if row_count == 0 {
                    return Err(at(format!("partition {file} declares zero rows")));
                }
                partitions.push(PartitionMeta { file: file.to_string(), row_count });
            }
            other => return Err(at(format!("unknown key {other}"))),
        }
    }

    let name = name.ok_or_else(|| Error::Ingest(format!("{}: missing table=", meta_path.display())))?;
    let primary_key = primary_key
        .ok_or_else(|| Error::Ingest(format!("{}: missing primary_key=", meta_path.display())))?;
    if primary_key.is_empty() {
        return Err(Error::Ingest(format!("table {name} needs a non-empty primary key")));
    }
    let ck = clustering_key.filter(|c| !c.is_empty());
    let schema = EdfSchema::new(attributes, primary_key, ck)
        .map_err(|e| Error::Ingest(format!("table {name}: {e}")))?;
    Ok(TableMeta { name, dir: dir.to_path_buf(), schema, partitions })
}

fn parse_cell(kind: ValueKind, field: &str, columns: &mut [Column], col: usize) -> Result<()> {
    if field.is_empty() {
        return Err(Error::Ingest("empty cell".into()));
    }
    match (&mut columns[col], kind) {
        (Column::Int64(v), ValueKind::Int64) => {
            v.push(field.parse::<i64>().map_err(|_| {
                Error::Ingest(format!("`{field}` is not a valid int64"))
            })?);
        }
        (Column::Float64(v), ValueKind::Float64) => {
            v.push(field.parse::<f64>().map_err(|_| {
                Error::Ingest(format!("`{field}` is not a valid float64"))
            })?);
        }
        (Column::Utf8(v), ValueKind::Utf8) => v.push(field.to_string()),
        _ => unreachable!("columns built from the schema"),
    }
    Ok(())
}

/// Reads one partition by metadata index. The returned progress is the
/// cumulative fraction of table rows through this partition in metadata
/// order; callers replaying partitions in a different order recompute it.
pub fn read_partition(meta: &TableMeta, index: usize) -> Result<(RowBatch, Progress)> {
    let part = meta.partitions.get(index).ok_or_else(|| {
        Error::Ingest(format!(
            "table {} has {} partitions, asked for {index}",
            meta.name,
            meta.partitions.len()
        ))
    })?;
    let path = meta.dir.join(&part.file);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let expected: Vec<&str> = meta.schema.attributes.iter().map(|a| a.name.as_str()).collect();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Ingest(format!(
            "{}: header [{}] does not match schema [{}]",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", "),
            expected.join(", ")
        )));
    }

    let mut columns: Vec<Column> =
        meta.schema.attributes.iter().map(|a| Column::empty(a.value_kind)).collect();
    let mut rows = 0u64;
    for (recno, record) in reader.records().enumerate() {
        // header occupies line 1, so data records start at line 2
        let line = recno + 2;
        let record =
            record.map_err(|e| Error::Ingest(format!("{}:{line}: {e}", path.display())))?;
        if record.len() != meta.schema.attributes.len() {
            return Err(Error::Ingest(format!(
                "{}:{line}: expected {} fields, got {}",
                path.display(),
                meta.schema.attributes.len(),
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            parse_cell(meta.schema.attributes[col].value_kind, field, &mut columns, col)
                .map_err(|e| Error::Ingest(format!("{}:{line}: {e}", path.display())))?;
        }
        rows += 1;
    }
    if rows != part.row_count {
        return Err(Error::Ingest(format!(
            "{} declares {} rows, found {rows}",
            path.display(),
            part.row_count
        )));
    }

    let done: u64 = meta.partitions[..=index].iter().map(|p| p.row_count).sum();
    let progress = Progress::new(done, meta.total_rows());
    Ok((RowBatch { schema: meta.schema.clone(), columns }, progress))
}

/// Loads every partition (validating declared row counts) into an
/// executor-ready table.
pub fn bind_table(meta: &TableMeta) -> Result<BoundTable> {
    let partitions = (0..meta.partitions.len())
        .map(|i| read_partition(meta, i).map(|(rows, _)| rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundTable { schema: meta.schema.clone(), partitions })
}

/// A deterministic partition replay order. Seed 0 is the identity order;
/// any other seed is a uniform shuffle. Tables with a clustering key
/// refuse to shuffle (their consumers rely on key-ordered arrival) unless
/// `force_clustered` is set.
pub fn shuffle_order(meta: &TableMeta, seed: u64, force_clustered: bool) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..meta.partitions.len()).collect();
    if seed == 0 {
        return Ok(order);
    }
    if meta.schema.clustering_key.is_some() && !force_clustered {
        return Err(Error::Ingest(format!(
            "table {} is clustered; shuffling its partitions breaks the ordered \
             arrival its consumers rely on",
            meta.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order)
}

fn format_cell(column: &Column, row: usize) -> String {
    match column {
        Column::Int64(v) => v[row].to_string(),
        // round-trips every f64 exactly
        Column::Float64(v) => format!("{:?}", v[row]),
        Column::Utf8(v) => v[row].clone(),
    }
}

/// Writes a table directory in the layout `load_meta` reads: a `meta` file
/// plus `part-NNNNN.csv` per batch. Empty batches are rejected because the
/// format requires positive per-partition row counts.
pub fn write_table(
    dir: impl AsRef<Path>,
    name: &str,
    schema: &EdfSchema,
    partitions: &[RowBatch],
) -> Result<TableMeta> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut meta = String::new();
    meta.push_str(&format!("table={name}\n"));
    for attr in &schema.attributes {
        meta.push_str(&format!(
            "column={}:{}:{}\n",
            attr.name,
            attr.value_kind.name(),
            attr.mutability.name()
        ));
    }
    meta.push_str(&format!("primary_key={}\n", schema.primary_key.join(",")));
    if let Some(ck) = &schema.clustering_key {
        meta.push_str(&format!("clustering_key={}\n", ck.join(",")));
    }

    let header: Vec<&str> = schema.attributes.iter().map(|a| a.name.as_str()).collect();
    let mut parts = Vec::with_capacity(partitions.len());
    for (i, batch) in partitions.iter().enumerate() {
        if batch.schema.attributes != schema.attributes {
            return Err(Error::Ingest(format!(
                "partition {i} of {name} does not match the table schema"
            )));
        }
        let rows = batch.row_count();
        if rows == 0 {
            return Err(Error::Ingest(format!("partition {i} of {name} is empty")));
        }
        let file = format!("part-{i:05}.csv");
        let path = dir.join(&file);
        let mut out = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        out.write_record(&header).map_err(|e| csv_error(&path, e))?;
        for row in 0..rows {
            out.write_record(batch.columns.iter().map(|c| format_cell(c, row)))
                .map_err(|e| csv_error(&path, e))?;
        }
        out.flush()?;
        meta.push_str(&format!("partition={file}:{rows}\n"));
        parts.push(PartitionMeta { file, row_count: rows as u64 });
    }
    fs::write(dir.join("meta"), meta)?;
    Ok(TableMeta {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        schema: schema.clone(),
        partitions: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn demo_schema(clustered: bool) -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("id", ValueKind::Int64),
                AttributeDef::constant("cat", ValueKind::Utf8),
                AttributeDef::constant("amount", ValueKind::Float64),
            ],
            vec!["id".into()],
            clustered.then(|| vec!["cat".into()]),
        )
        .unwrap()
    }

    fn demo_part(ids: &[i64], cats: &[&str], amounts: &[f64]) -> RowBatch {
        RowBatch {
            schema: demo_schema(false),
            columns: vec![
                Column::Int64(ids.to_vec()),
                Column::Utf8(cats.iter().map(|s| s.to_string()).collect()),
                Column::Float64(amounts.to_vec()),
            ],
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempdir().unwrap();
        let parts = vec![
            demo_part(&[1, 2, 3], &["a", "b", "a"], &[1.5, 2.25, -0.125]),
            demo_part(&[4, 5], &["b", "c"], &[1e300, 1.0000000000000002]),
        ];
        let written = write_table(dir.path(), "sales", &demo_schema(false), &parts).unwrap();
        assert_eq!(written.total_rows(), 5);

        let meta = load_meta(dir.path()).unwrap();
        assert_eq!(meta.name, "sales");
        assert_eq!(meta.schema, demo_schema(false));
        assert_eq!(meta.partitions.len(), 2);
        assert_eq!(meta.total_rows(), 5);

        let (batch0, p0) = read_partition(&meta, 0).unwrap();
        assert_eq!(batch0, parts[0], "values round-trip exactly, floats included");
        assert_eq!(p0, Progress::new(3, 5));
        let (batch1, p1) = read_partition(&meta, 1).unwrap();
        assert_eq!(batch1, parts[1]);
        assert_eq!(p1, Progress::new(5, 5));
        assert!(p1.is_final());

        let bound = bind_table(&meta).unwrap();
        assert_eq!(bound.partitions.len(), 2);
        assert_eq!(bound.total_rows(), 5);
    }

    #[test]
    fn parse_errors_point_at_file_and_line() {
        let dir = tempdir().unwrap();
        let meta = write_table(
            dir.path(),
            "t",
            &demo_schema(false),
            &[demo_part(&[1], &["a"], &[1.0])],
        )
        .unwrap();

        // corrupt the amount on the first data row (line 2)
        let part = dir.path().join("part-00000.csv");
        let text = fs::read_to_string(&part).unwrap().replace("1.0", "not-a-number");
        fs::write(&part, text).unwrap();

        let err = read_partition(&meta, 0).unwrap_err().to_string();
        assert!(err.contains("part-00000.csv:2"), "{err}");
        assert!(err.contains("not-a-number"), "{err}");

        // an empty cell is rejected, not defaulted
        fs::write(&part, "id,cat,amount\n1,,2.0\n").unwrap();
        let err = read_partition(&meta, 0).unwrap_err().to_string();
        assert!(err.contains("empty cell"), "{err}");
    }

    #[test]
    fn declared_row_counts_are_checked_lazily() {
        let dir = tempdir().unwrap();
        write_table(dir.path(), "t", &demo_schema(false), &[demo_part(&[1], &["a"], &[1.0])])
            .unwrap();

        // the lie in the meta file is only caught when the partition is read
        let meta_path = dir.path().join("meta");
        let text = fs::read_to_string(&meta_path).unwrap().replace(":1\n", ":7\n");
        fs::write(&meta_path, text).unwrap();

        let meta = load_meta(dir.path()).unwrap();
        assert_eq!(meta.partitions[0].row_count, 7);
        let err = read_partition(&meta, 0).unwrap_err().to_string();
        assert!(err.contains("declares 7 rows, found 1"), "{err}");
    }

    #[test]
    fn malformed_meta_files_are_rejected() {
        let dir = tempdir().unwrap();
        let write_meta = |text: &str| fs::write(dir.path().join("meta"), text).unwrap();

        write_meta("column=id:int64:constant\nprimary_key=id\n");
        assert!(load_meta(dir.path()).unwrap_err().to_string().contains("missing table="));

        write_meta("table=t\ncolumn=id:int64:constant\n");
        assert!(load_meta(dir.path()).unwrap_err().to_string().contains("missing primary_key="));

        write_meta("table=t\ncolumn=id:int64:constant\nprimary_key=\n");
        assert!(load_meta(dir.path()).unwrap_err().to_string().contains("non-empty primary key"));

        write_meta("table=t\ncolumn=id:int64:constant\nprimary_key=id\nflavor=spicy\n");
        let err = load_meta(dir.path()).unwrap_err().to_string();
        assert!(err.contains("meta:4") && err.contains("unknown key flavor"), "{err}");

        write_meta("table=t\ncolumn=id:int64:constant\nprimary_key=id\npartition=p.csv:0\n");
        assert!(load_meta(dir.path()).unwrap_err().to_string().contains("zero rows"));

        write_meta("table=t\ncolumn=id:whatever:constant\nprimary_key=id\n");
        assert!(load_meta(dir.path()).unwrap_err().to_string().contains("unknown column type"));
    }

    #[test]
    fn shuffle_orders_are_seeded_and_respect_clustering() {
        let dir = tempdir().unwrap();
        let parts: Vec<RowBatch> = (0..6)
            .map(|i| demo_part(&[i], &["a"], &[i as f64]))
            .collect();
        let meta = write_table(dir.path(), "t", &demo_schema(false), &parts).unwrap();

        assert_eq!(shuffle_order(&meta, 0, false).unwrap(), vec![0, 1, 2, 3, 4, 5]);

        let a = shuffle_order(&meta, 42, false).unwrap();
        let b = shuffle_order(&meta, 42, false).unwrap();
        assert_eq!(a, b, "same seed, same order");
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5], "a permutation, nothing lost");
        let c = shuffle_order(&meta, 43, false).unwrap();
        assert_ne!(a, c, "six partitions make seed collisions vanishingly unlikely");

        let clustered_dir = tempdir().unwrap();
        let clustered_parts: Vec<RowBatch> = (0..3)
            .map(|i| {
                let mut b = demo_part(&[i], &["a"], &[0.0]);
                b.schema = demo_schema(true);
                b
            })
            .collect();
        let clustered =
            write_table(clustered_dir.path(), "c", &demo_schema(true), &clustered_parts).unwrap();
        assert!(shuffle_order(&clustered, 7, false).is_err());
        assert_eq!(shuffle_order(&clustered, 0, false).unwrap(), vec![0, 1, 2]);
        let forced = shuffle_order(&clustered, 7, true).unwrap();
        let mut sorted = forced.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let meta = write_table(dir.path(), "t", &demo_schema(false), &[demo_part(&[1], &["a"], &[1.0])])
            .unwrap();
        let part = dir.path().join("part-00000.csv");
        let text = fs::read_to_string(&part).unwrap().replace("id,cat,amount", "id,cat,price");
        fs::write(&part, text).unwrap();
        let err = read_partition(&meta, 0).unwrap_err().to_string();
        assert!(err.contains("does not match schema"), "{err}");
    }

    #[test]
    fn utf8_cells_with_commas_round_trip_via_quoting() {
        let dir = tempdir().unwrap();
        let part = demo_part(&[1, 2], &["x,y", "says \"hi\""], &[2.0, 3.0]);
        let meta = write_table(dir.path(), "t", &demo_schema(false), &[part.clone()]).unwrap();
        let (batch, _) = read_partition(&meta, 0).unwrap();
        assert_eq!(batch, part);
    }
}
