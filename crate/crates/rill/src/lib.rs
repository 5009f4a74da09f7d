//! Deep online aggregation over partitioned tables.
//!
//! A query runs as a pipelined graph of operators over an evolving data
//! frame (EDF): a time-indexed dataset that emits a stream of refining
//! snapshots while partitions are ingested. Aggregates are maintained as
//! mergeable intrinsic state and converted to unbiased extrinsic estimates
//! by growth-based inference; every snapshot carries Chebyshev confidence
//! intervals, and the snapshot at progress t = 1 is the exact batch answer.

#![forbid(unsafe_code)]

pub mod bench;
pub mod confidence;
pub mod edf;
pub mod error;
pub mod exec;
pub mod inference;
pub mod ingest;
pub mod ops;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
