//! End-to-end checks of the binary: generate a table, run a query both
//! online and batch, and score one against the other.

use std::path::Path;
use std::process::{Command, Output};

fn rill(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rill"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).expect("utf8 output")
}

const QUERY: &str = "\
table facts dir=facts
node scan read table=facts
node keep filter input=scan where=\"x < 0.75\"
node by_g agg input=keep by=g aggs=count:n,sum:x:total
sink by_g
";

#[test]
fn generate_run_exact_and_score_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = rill(
        &["gen", "monomial", "--dir", "facts", "--rows", "2000", "--groups", "7",
          "--partitions", "8", "--row-exponent", "1.4", "--group-exponent", "0.6", "--seed", "3"],
        dir.path(),
    );
    let gen_report = assert_ok(&out);
    assert!(gen_report.contains("2000 rows, 8 partitions"));
    assert!(gen_report.contains("wrote query "), "{gen_report}");

    std::fs::write(dir.path().join("query.rill"), QUERY).unwrap();

    let exact = assert_ok(&rill(&["exact", "query.rill"], dir.path()));
    std::fs::write(dir.path().join("exact.snap"), &exact).unwrap();
    assert!(exact.starts_with("schema,g:int64:constant"), "{exact}");

    let stream = assert_ok(&rill(
        &["run", "query.rill", "--sequential", "--partition-order", "facts=11"],
        dir.path(),
    ));
    std::fs::write(dir.path().join("run.snap"), &stream).unwrap();
    assert!(stream.lines().filter(|l| l.starts_with("snapshot,")).count() >= 8);
    assert!(stream.lines().any(|l| l.starts_with("ci,n,")), "intervals on by default");

    let report = assert_ok(&rill(&["score", "run.snap", "exact.snap"], dir.path()));
    let last = report.lines().last().unwrap();
    assert!(last.contains("mape=0.000000"), "final snapshot is exact: {last}");
    assert!(last.contains("recall=1.0000"), "{last}");
    assert!(last.contains("precision=1.0000"), "{last}");
    assert!(last.contains("groups=7/7"), "{last}");
}

#[test]
fn generated_query_files_run_as_written() {
    let dir = tempfile::tempdir().unwrap();

    // the monomial query lives inside the table dir and resolves `dir=.`
    // against its own location
    assert_ok(&rill(
        &["gen", "monomial", "--dir", "facts", "--rows", "300", "--groups", "5",
          "--partitions", "4", "--seed", "3"],
        dir.path(),
    ));
    let exact = assert_ok(&rill(&["exact", "facts/query.rill"], dir.path()));
    std::fs::write(dir.path().join("exact.snap"), &exact).unwrap();
    let stream = assert_ok(&rill(&["run", "facts/query.rill", "--sequential"], dir.path()));
    std::fs::write(dir.path().join("run.snap"), &stream).unwrap();
    let report = assert_ok(&rill(&["score", "run.snap", "exact.snap"], dir.path()));
    let last = report.lines().last().unwrap();
    assert!(last.contains("mape=0.000000"), "{last}");
    assert!(last.contains("groups=5/5"), "{last}");

    // the deep query honors --depth and runs down to its scalar total
    let out = assert_ok(&rill(
        &["gen", "deep", "--dir", "chain", "--name", "chain", "--rows", "400",
          "--partitions", "4", "--key-columns", "3", "--branching", "3", "--depth", "3"],
        dir.path(),
    ));
    assert!(out.contains("wrote query "), "{out}");
    let stream = assert_ok(&rill(&["run", "chain/query.rill", "--no-ci"], dir.path()));
    let rows: Vec<&str> = stream.lines().filter(|l| l.starts_with("row,")).collect();
    assert_eq!(rows.len(), 4, "one scalar row per partition snapshot: {stream}");

    // a depth the key chain cannot support is rejected up front
    let out = rill(
        &["gen", "deep", "--dir", "chain2", "--key-columns", "3", "--depth", "5",
          "--rows", "400", "--partitions", "4", "--branching", "3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_seed_shuffles_unclustered_tables_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rill(
        &["gen", "monomial", "--dir", "facts", "--rows", "2000", "--groups", "7",
          "--partitions", "8", "--group-exponent", "0.6", "--seed", "3"],
        dir.path(),
    ));
    std::fs::write(dir.path().join("query.rill"), QUERY).unwrap();
    let data_lines = |stream: &str| -> Vec<String> {
        stream
            .lines()
            .filter(|l| l.starts_with("row,") || l.starts_with("ci,"))
            .map(str::to_string)
            .collect()
    };

    let base = assert_ok(&rill(&["run", "query.rill", "--sequential"], dir.path()));
    let a = assert_ok(&rill(&["run", "query.rill", "--sequential", "--seed", "42"], dir.path()));
    let b = assert_ok(&rill(&["run", "query.rill", "--sequential", "--seed", "42"], dir.path()));
    assert_eq!(data_lines(&a), data_lines(&b), "same seed replays the same stream");
    assert_ne!(data_lines(&a), data_lines(&base), "seed 42 shuffles arrival order");

    // an explicit --partition-order pins the table against the run seed
    let pinned = assert_ok(&rill(
        &["run", "query.rill", "--sequential", "--seed", "42", "--partition-order", "facts=0"],
        dir.path(),
    ));
    assert_eq!(data_lines(&pinned), data_lines(&base));

    // clustered tables silently keep their metadata order under --seed
    assert_ok(&rill(
        &["gen", "deep", "--dir", "chain", "--name", "chain", "--rows", "400",
          "--partitions", "4", "--key-columns", "3", "--branching", "3", "--depth", "1"],
        dir.path(),
    ));
    let plain = assert_ok(&rill(&["run", "chain/query.rill", "--no-ci"], dir.path()));
    let seeded =
        assert_ok(&rill(&["run", "chain/query.rill", "--no-ci", "--seed", "42"], dir.path()));
    assert_eq!(data_lines(&plain), data_lines(&seeded));
}

#[test]
fn trace_lines_go_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rill(
        &["gen", "monomial", "--dir", "facts", "--rows", "64", "--groups", "2",
          "--partitions", "4"],
        dir.path(),
    ));
    std::fs::write(dir.path().join("query.rill"), QUERY).unwrap();
    let out = rill(&["run", "query.rill", "--trace", "--no-ci"], dir.path());
    let stdout = assert_ok(&out);
    assert!(!stdout.contains("trace "), "trace stays off stdout");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("trace scan partition ")), "{stderr}");
}

#[test]
fn validation_and_execution_failures_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rill(
        &["gen", "monomial", "--dir", "facts", "--rows", "16", "--groups", "2",
          "--partitions", "2"],
        dir.path(),
    ));

    // a query naming a column the table lacks is a validation error
    std::fs::write(
        dir.path().join("bad.rill"),
        "table facts dir=facts\nnode scan read table=facts\nnode keep filter input=scan where=\"nope > 1\"\nsink keep\n",
    )
    .unwrap();
    let out = rill(&["run", "bad.rill"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    // a missing snapshot file is an execution failure, not bad input
    let out = rill(&["score", "missing.snap", "missing.snap"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // a confidence level outside (0, 1) is rejected up front
    std::fs::write(dir.path().join("query.rill"), QUERY).unwrap();
    let out = rill(&["run", "query.rill", "--ci-level", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn clustered_tables_refuse_shuffles_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rill(
        &["gen", "deep", "--dir", "chain", "--name", "chain", "--rows", "500",
          "--partitions", "4", "--key-columns", "3", "--branching", "3"],
        dir.path(),
    ));
    std::fs::write(
        dir.path().join("deep.rill"),
        "table chain dir=chain\nnode scan read table=chain\nnode by agg input=scan by=c1 aggs=max:x:peak\nsink by\n",
    )
    .unwrap();

    let out = rill(&["run", "deep.rill", "--partition-order", "chain=5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("is clustered"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // identity order is always allowed, and the query still runs
    let stream =
        assert_ok(&rill(&["run", "deep.rill", "--partition-order", "chain=0"], dir.path()));
    assert!(stream.lines().last().unwrap().starts_with("row,") || stream.contains("snapshot,"));
}
