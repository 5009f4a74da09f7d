//! Version/partial organization of intrinsic state, plus progress and
//! growth metadata.
//!
//! A version is one complete logical refresh; partials append key-disjoint
//! increments to the newest version. Only the latest version is retained
//! (plus a sequence counter); older content is dropped once superseded.

use std::collections::HashSet;

use crate::{Error, Result};

use super::frame::{Key, RowBatch};

/// Read progress as exact integer row arithmetic. The real-valued t is
/// derived on demand; t = 1 holds exactly at EOF, never 0.999… from
/// float accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub done: u64,
    pub total: u64,
}

impl Progress {
    pub fn new(done: u64, total: u64) -> Self {
        debug_assert!(done <= total);
        Progress { done, total }
    }

    pub fn start(total: u64) -> Self {
        Progress { done: 0, total }
    }

    pub fn final_over(total: u64) -> Self {
        Progress { done: total, total }
    }

    /// Fraction of original input rows processed. An empty input (total 0)
    /// is complete by definition.
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.done as f64 / self.total as f64
        }
    }

    pub fn is_final(&self) -> bool {
        self.done == self.total
    }

    /// The smaller of two progress values (exact rational comparison);
    /// used where one edf depends on two inputs.
    pub fn min(self, other: Progress) -> Progress {
        if self.total == 0 {
            return other;
        }
        if other.total == 0 {
            return self;
        }
        // done_a/total_a <= done_b/total_b without division
        let lhs = self.done as u128 * other.total as u128;
        let rhs = other.done as u128 * self.total as u128;
        if lhs <= rhs {
            self
        } else {
            other
        }
    }
}

pub fn is_final(progress: Progress) -> bool {
    progress.is_final()
}

/// Monomial growth metadata of an edf: expected cardinality grows like
/// c·t^w. Base tables grow linearly (w = 1); a completed aggregate output
/// has constant cardinality (w = 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthSpec {
    pub w: f64,
    pub c: f64,
}

impl GrowthSpec {
    pub fn new(w: f64, c: f64) -> Result<Self> {
        if c < 0.0 || !c.is_finite() || !w.is_finite() {
            return Err(Error::Domain(format!("invalid growth spec w={w} c={c}")));
        }
        Ok(GrowthSpec { w, c })
    }

    pub fn base_table(rows: u64) -> Self {
        GrowthSpec { w: 1.0, c: rows as f64 }
    }

    pub fn constant_cardinality(rows: f64) -> Self {
        GrowthSpec { w: 0.0, c: rows }
    }
}

#[derive(Debug, Clone)]
pub struct Partial {
    pub rows: RowBatch,
    pub key_set: HashSet<Key>,
}

impl Partial {
    /// Builds a partial, deriving the key set from the batch's schema
    /// primary key.
    pub fn new(rows: RowBatch) -> Result<Self> {
        let pk = rows.schema.primary_key.clone();
        let mut key_set = HashSet::with_capacity(rows.row_count());
        for row in 0..rows.row_count() {
            key_set.insert(rows.key_of_row(&pk, row)?);
        }
        Ok(Partial { rows, key_set })
    }

    pub fn is_disjoint(&self, other: &Partial) -> bool {
        self.key_set.is_disjoint(&other.key_set)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Version {
    pub partials: Vec<Partial>,
}

impl Version {
    pub fn new() -> Self {
        Version { partials: Vec::new() }
    }

    pub fn of_partials(partials: Vec<Partial>) -> Result<Self> {
        let mut v = Version::new();
        for p in partials {
            v.add(p)?;
        }
        Ok(v)
    }

    /// Adds a partial; its keys must be disjoint from every partial already
    /// in this version.
    pub fn add(&mut self, p: Partial) -> Result<()> {
        for existing in &self.partials {
            if !existing.is_disjoint(&p) {
                let overlap = existing
                    .key_set
                    .intersection(&p.key_set)
                    .next()
                    .map(|k| format!("{k:?}"))
                    .unwrap_or_default();
                return Err(Error::KeyOverlap(format!(
                    "partial overlaps existing keys (e.g. {overlap}); a merge was required"
                )));
            }
        }
        self.partials.push(p);
        Ok(())
    }

    pub fn row_count(&self) -> usize {
        self.partials.iter().map(|p| p.rows.row_count()).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct IntrinsicState {
    latest: Option<Version>,
    version_seq: u64,
}

impl IntrinsicState {
    /// A state with no version yet; `latest_state` errors until one is
    /// pushed.
    pub fn empty() -> Self {
        IntrinsicState::default()
    }

    /// A state holding one empty version, ready for appends.
    pub fn with_initial_version() -> Self {
        IntrinsicState { latest: Some(Version::new()), version_seq: 1 }
    }

    pub fn version_seq(&self) -> u64 {
        self.version_seq
    }

    pub fn latest_version(&self) -> Option<&Version> {
        self.latest.as_ref()
    }

    /// Union of all partials of the newest version, in append order.
    pub fn latest_state(&self) -> Result<RowBatch> {
        let version = self
            .latest
            .as_ref()
            .ok_or_else(|| Error::State("no version exists".into()))?;
        let schema = version
            .partials
            .first()
            .map(|p| p.rows.schema.clone())
            .ok_or_else(|| Error::State("latest version is empty; schema unknown".into()))?;
        let refs: Vec<&RowBatch> = version.partials.iter().map(|p| &p.rows).collect();
        RowBatch::concat(schema, &refs)
    }

    /// As `latest_state`, but an empty version yields an empty batch of
    /// the given schema instead of an error.
    pub fn latest_state_or_empty(&self, schema: &super::schema::EdfSchema) -> Result<RowBatch> {
        match &self.latest {
            Some(v) if !v.partials.is_empty() => self.latest_state(),
            Some(_) => Ok(RowBatch::empty(schema.clone())),
            None => Err(Error::State("no version exists".into())),
        }
    }

    pub fn append_partial(&mut self, p: Partial) -> Result<()> {
        let version = self
            .latest
            .as_mut()
            .ok_or_else(|| Error::State("no version to append to".into()))?;
        version.add(p)
    }

    /// Installs `v` as the newest version; prior content is dropped.
    pub fn push_version(&mut self, v: Version) {
        self.latest = Some(v);
        self.version_seq += 1;
    }
}
