//! Command-line front end for the rill engine: run queries online, print
//! exact batch answers, score estimate streams, and generate datasets.
//!
//! Exit codes: 0 on success, 2 when the query, data, or arguments are
//! invalid, 3 when execution fails.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use indexmap::IndexMap;

use rill::bench::{
    batch_answer, deep_query_text, deep_table, load_query, monomial, monomial_query_text,
    read_snapshots, score, write_header, write_snapshot, DeepSpec, LoadedQuery, MonomialSpec,
};
use rill::edf::{EdfSchema, Progress};
use rill::exec::{
    build_graph, run, run_sequential, BoundTable, RunOptions, SnapshotRecord, TraceEvent,
};
use rill::ingest::{bind_table, shuffle_order, write_table};

#[derive(Parser)]
#[command(name = "rill", version, about = "Online aggregation over partitioned tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a query, streaming refining snapshots to stdout.
    Run(RunArgs),
    /// Print the exact batch answer as a one-snapshot stream.
    Exact {
        /// Query file.
        query: PathBuf,
    },
    /// Score a snapshot stream against an exact answer.
    Score(ScoreArgs),
    /// Generate a benchmark table.
    #[command(subcommand)]
    Gen(GenShape),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Query file.
    query: PathBuf,
    /// Run seed: drives bootstrap resampling and, when nonzero, shuffles
    /// the arrival order of every unclustered table not pinned by
    /// --partition-order. 0 keeps the metadata order everywhere.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shuffle one table's partition arrival order (repeatable). Seed 0
    /// keeps the metadata order.
    #[arg(long, value_name = "TABLE=SEED")]
    partition_order: Vec<String>,
    /// Shuffle clustered tables too, accepting that their consumers may
    /// reject the out-of-order arrival.
    #[arg(long)]
    force_shuffle: bool,
    /// Confidence level of reported intervals, in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Drop confidence intervals from the output.
    #[arg(long)]
    no_ci: bool,
    /// Use the single-threaded runner (same snapshots, one thread).
    #[arg(long)]
    sequential: bool,
    /// Write per-partition operator timings to stderr after the run.
    #[arg(long)]
    trace: bool,
}

#[derive(clap::Args)]
struct ScoreArgs {
    /// Snapshot stream written by `rill run`.
    estimates: PathBuf,
    /// One-snapshot stream written by `rill exact`.
    exact: PathBuf,
    /// Columns to match rows on; defaults to the exact answer's key.
    #[arg(long, value_delimiter = ',')]
    key: Vec<String>,
}

#[derive(Subcommand)]
enum GenShape {
    /// Unclustered fact table (id, g, x) whose row and group counts grow
    /// as powers of scan progress.
    Monomial {
        /// Directory to write the table into.
        #[arg(long)]
        dir: PathBuf,
        /// Table name recorded in the metadata.
        #[arg(long, default_value = "facts")]
        name: String,
        #[arg(long, default_value_t = 100_000)]
        rows: u64,
        #[arg(long, default_value_t = 100)]
        groups: u64,
        #[arg(long, default_value_t = 20)]
        partitions: usize,
        /// Cumulative rows through partition p follow (p/P)^E.
        #[arg(long, value_name = "E", default_value_t = 1.0)]
        row_exponent: f64,
        /// Eligible groups by partition p follow (p/P)^E.
        #[arg(long, value_name = "E", default_value_t = 0.0)]
        group_exponent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Table clustered on a chain of key columns c1..cK, for stacked
    /// exact aggregations.
    Deep {
        /// Directory to write the table into.
        #[arg(long)]
        dir: PathBuf,
        /// Table name recorded in the metadata.
        #[arg(long, default_value = "facts")]
        name: String,
        #[arg(long, default_value_t = 30_000)]
        rows: u64,
        #[arg(long, default_value_t = 10)]
        partitions: usize,
        #[arg(long, default_value_t = 10)]
        key_columns: usize,
        /// Each key column draws from 0..B.
        #[arg(long, value_name = "B", default_value_t = 4)]
        branching: i64,
        /// x draws from 0..R.
        #[arg(long, value_name = "R", default_value_t = 1_000_000)]
        value_range: i64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rollup depth of the generated query file, at most key-columns.
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<rill::Error>() {
                Some(e) if e.is_validation() => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Exact { query } => cmd_exact(&query),
        Command::Score(args) => cmd_score(&args),
        Command::Gen(shape) => cmd_gen(shape),
    }
}

fn bind_all(loaded: &LoadedQuery) -> anyhow::Result<IndexMap<String, BoundTable>> {
    let mut tables = IndexMap::new();
    for (name, meta) in &loaded.tables {
        let bound = bind_table(meta).with_context(|| format!("loading table {name}"))?;
        tables.insert(name.clone(), bound);
    }
    Ok(tables)
}

fn schemas_of(loaded: &LoadedQuery) -> IndexMap<String, EdfSchema> {
    loaded.tables.iter().map(|(name, meta)| (name.clone(), meta.schema.clone())).collect()
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    if !(args.ci_level > 0.0 && args.ci_level < 1.0) {
        bail!(rill::Error::Domain(format!(
            "confidence level {} is not inside (0, 1)",
            args.ci_level
        )));
    }
    let loaded = load_query(&args.query)?;
    let graph = build_graph(&loaded.graph, &schemas_of(&loaded))?;

    let mut orders = HashMap::new();
    for entry in &args.partition_order {
        let (table, seed) = entry
            .split_once('=')
            .with_context(|| format!("--partition-order `{entry}` is not TABLE=SEED"))?;
        let seed: u64 =
            seed.parse().with_context(|| format!("--partition-order seed `{seed}`"))?;
        let meta = loaded
            .tables
            .get(table)
            .with_context(|| format!("query does not read a table named {table}"))?;
        orders.insert(table.to_string(), shuffle_order(meta, seed, args.force_shuffle)?);
    }
    if args.seed != 0 {
        // Clustered tables keep their metadata order: their consumers
        // depend on ordered arrival, so the run seed never touches them.
        for (index, (name, meta)) in loaded.tables.iter().enumerate() {
            if orders.contains_key(name) || meta.schema.clustering_key.is_some() {
                continue;
            }
            let derived = args.seed.wrapping_add(index as u64);
            orders.insert(name.clone(), shuffle_order(meta, derived, false)?);
        }
    }

    let tables = bind_all(&loaded)?;
    let opts = RunOptions {
        orders,
        ci_delta: if args.no_ci { None } else { Some(1.0 - args.ci_level) },
        seed: args.seed,
        trace: args.trace,
        ..RunOptions::default()
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    out.write_all(write_header(graph.sink_schema()).as_bytes())?;
    let mut emit_err: Option<rill::Error> = None;
    let emit = |snap: &SnapshotRecord| {
        if emit_err.is_some() {
            return;
        }
        match write_snapshot(snap) {
            Ok(text) => {
                if out.write_all(text.as_bytes()).and_then(|()| out.flush()).is_err() {
                    emit_err = Some(rill::Error::Exec("stdout closed mid-stream".into()));
                }
            }
            Err(e) => emit_err = Some(e),
        }
    };
    let output = if args.sequential {
        run_sequential(&graph, &tables, &opts, emit)?
    } else {
        run(&graph, &tables, &opts, emit)?
    };
    if let Some(e) = emit_err {
        return Err(e.into());
    }
    if args.trace {
        let mut err = std::io::stderr().lock();
        for TraceEvent { node, partition, start, end } in &output.trace {
            writeln!(
                err,
                "trace {node} partition {partition} {:.3}ms..{:.3}ms",
                start.as_secs_f64() * 1e3,
                end.as_secs_f64() * 1e3
            )?;
        }
    }
    Ok(())
}

fn cmd_exact(query: &PathBuf) -> anyhow::Result<()> {
    let started = Instant::now();
    let loaded = load_query(query)?;
    let graph = build_graph(&loaded.graph, &schemas_of(&loaded))?;
    let tables = bind_all(&loaded)?;
    let rows = batch_answer(&loaded.graph, &tables)?;
    let total: u64 = tables.values().map(BoundTable::total_rows).sum();
    let snap = SnapshotRecord {
        snapshot_index: 0,
        t: Progress::final_over(total),
        wall_clock: started.elapsed(),
        rows,
        ci: None,
    };
    let mut out = std::io::stdout().lock();
    out.write_all(write_header(graph.sink_schema()).as_bytes())?;
    out.write_all(write_snapshot(&snap)?.as_bytes())?;
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> anyhow::Result<()> {
    let estimates = std::fs::read_to_string(&args.estimates)
        .with_context(|| format!("reading {}", args.estimates.display()))?;
    let exact = std::fs::read_to_string(&args.exact)
        .with_context(|| format!("reading {}", args.exact.display()))?;
    let estimates = read_snapshots(&estimates)?;
    let exact = read_snapshots(&exact)?;
    let [truth] = exact.snapshots.as_slice() else {
        bail!(rill::Error::Domain(format!(
            "exact stream must hold one snapshot, found {}",
            exact.snapshots.len()
        )));
    };
    let key = if args.key.is_empty() { exact.schema.primary_key.clone() } else { args.key.clone() };

    let mut out = std::io::stdout().lock();
    for snap in &estimates.snapshots {
        let card = score(&snap.rows, &truth.rows, &key)?;
        writeln!(
            out,
            "snapshot {} t={}/{} mape={:.6} mae={:.6} recall={:.4} precision={:.4} groups={}/{}",
            snap.snapshot_index,
            snap.t.done,
            snap.t.total,
            card.mape,
            card.mae,
            card.recall,
            card.precision,
            card.matched_groups,
            truth.rows.row_count()
        )?;
    }
    Ok(())
}

fn cmd_gen(shape: GenShape) -> anyhow::Result<()> {
    let (dir, name, schema, batches, query_text) = match shape {
        GenShape::Monomial {
            dir,
            name,
            rows,
            groups,
            partitions,
            row_exponent,
            group_exponent,
            seed,
        } => {
            let spec =
                MonomialSpec { rows, groups, partitions, row_exponent, group_exponent, seed };
            let (schema, batches) = monomial(&spec)?;
            let query = monomial_query_text(&name);
            (dir, name, schema, batches, query)
        }
        GenShape::Deep {
            dir,
            name,
            rows,
            partitions,
            key_columns,
            branching,
            value_range,
            seed,
            depth,
        } => {
            if depth > key_columns {
                bail!(rill::Error::Domain(format!(
                    "query depth {depth} exceeds the table's {key_columns} key columns"
                )));
            }
            let spec = DeepSpec { rows, partitions, key_columns, branching, value_range, seed };
            let (schema, batches) = deep_table(&spec)?;
            let query = deep_query_text(&name, depth);
            (dir, name, schema, batches, query)
        }
    };
    let meta = write_table(&dir, &name, &schema, &batches)?;
    let query_path = dir.join("query.rill");
    std::fs::write(&query_path, query_text)
        .with_context(|| format!("writing {}", query_path.display()))?;
    println!(
        "wrote table {} ({} rows, {} partitions) to {}",
        meta.name,
        meta.total_rows(),
        meta.partitions.len(),
        dir.display()
    );
    println!("wrote query {}", query_path.display());
    Ok(())
}
