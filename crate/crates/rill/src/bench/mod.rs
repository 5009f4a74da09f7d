//! Benchmark surface: query files, dataset generators, a batch oracle,
//! snapshot serialization, and estimate scoring.
//!
//! Everything here exists to measure the engine against ground truth. The
//! oracle recomputes answers in the most direct form it can, sharing no
//! evaluation code with the streaming operators, so an agreement between
//! the two is evidence rather than tautology.

mod gen;
mod oracle;
mod queryfile;
mod score;
mod snapfile;

pub use gen::{
    deep_query, deep_query_text, deep_table, monomial, monomial_query_text, DeepSpec,
    MonomialSpec,
};
pub use oracle::batch_answer;
pub use queryfile::{load_query, parse_query, LoadedQuery, QueryFile, TableDecl};
pub use score::{score, Scorecard};
pub use snapfile::{read_snapshots, write_header, write_snapshot, SnapshotStream};
