//! The evolving data frame: schema with attribute mutability, columnar row
//! batches, version/partial state organization, progress, and growth
//! metadata. Everything downstream (operators, executor) is built on these
//! types; they are plain values, safe to move between workers.

mod frame;
mod schema;
mod state;

pub use frame::{Column, Key, KeyScalar, RowBatch, Value};
pub use schema::{AttributeDef, EdfSchema, Mutability, ValueKind};
pub use state::{
    is_final, GrowthSpec, IntrinsicState, Partial, Progress, Version,
};
