//! Grouped aggregation as mergeable per-group state. Partials fold into
//! `AggState` (one call per input partial, so the jackknife over partials
//! stays meaningful), `merge_agg` combines states associatively, and
//! `to_extrinsic` turns a state at progress t into estimates of the final
//! answer with variances. `ClusteredAgg` is the exact streaming variant
//! for inputs already ordered by the group key.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::confidence::{initial_variance_order_stat, quantile_sorted, var_count_distinct};
use crate::edf::{
    AttributeDef, Column, EdfSchema, Key, KeyScalar, Mutability, Progress, RowBatch, Value,
    ValueKind,
};
use crate::inference::{
    estimate_count, estimate_count_distinct, estimate_final_cardinality, estimate_sum,
    estimate_weighted_avg, AggregateKind, CardinalityEstimate, GroupObservation,
};
use crate::ops::{EstimateBatch, Uncertainty, VarCell};
use crate::{Error, Result};

/// One aggregate to compute: kind, input column (None only for count),
/// output column name.
#[derive(Debug, Clone, PartialEq)]
pub struct AggSpec {
    pub kind: AggregateKind,
    pub input: Option<String>,
    pub output: String,
}

/// A tracked first/second-moment dimension: a column or its square.
#[derive(Debug, Clone, PartialEq)]
struct MomentDim {
    column: String,
    squared: bool,
    col_idx: usize,
    mutable_input: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Binding {
    Count,
    Sum { dim: usize },
    Avg { dim: usize },
    VarPop { dim: usize, sq: usize },
    StdDev { dim: usize, sq: usize },
    Extreme { sample: usize, col_idx: usize, is_min: bool, kind: ValueKind },
    Distinct { slot: usize, col_idx: usize },
    Quantile { sample: usize, col_idx: usize, q: f64 },
}

/// Validated aggregation plan: group keys, aggregate specs, and the
/// derived storage layout shared by every group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggPlan {
    pub group_by: Vec<String>,
    pub specs: Vec<AggSpec>,
    input_schema: EdfSchema,
    dims: Vec<MomentDim>,
    bindings: Vec<Binding>,
    n_samples: usize,
    n_distincts: usize,
}

fn is_numeric(kind: ValueKind) -> bool {
    matches!(kind, ValueKind::Int64 | ValueKind::Float64)
}

impl AggPlan {
    pub fn new(
        input_schema: &EdfSchema,
        group_by: Vec<String>,
        specs: Vec<AggSpec>,
    ) -> Result<AggPlan> {
        if specs.is_empty() {
            return Err(Error::Graph("aggregation needs at least one aggregate".into()));
        }
        for g in &group_by {
            let attr = input_schema
                .attribute(g)
                .ok_or_else(|| Error::Graph(format!("group key {g} does not exist")))?;
            if attr.mutability != Mutability::Constant {
                return Err(Error::Graph(format!(
                    "group key {g} is mutable; grouping needs stable keys"
                )));
            }
        }
        let mut dims: Vec<MomentDim> = Vec::new();
        let mut bindings = Vec::new();
        let mut n_samples = 0;
        let mut n_distincts = 0;
        let mut outputs: Vec<&str> = group_by.iter().map(|s| s.as_str()).collect();
        for spec in &specs {
            if outputs.contains(&spec.output.as_str()) {
                return Err(Error::Graph(format!(
                    "duplicate aggregate output column {}",
                    spec.output
                )));
            }
            outputs.push(&spec.output);

            let input_attr = match (&spec.input, spec.kind) {
                (None, AggregateKind::Count) => None,
                (None, kind) => {
                    return Err(Error::Graph(format!(
                        "aggregate {} needs an input column",
                        kind.name()
                    )))
                }
                (Some(_), AggregateKind::Count) => {
                    return Err(Error::Graph("count takes no input column".into()))
                }
                (Some(col), _) => Some(input_schema.attribute(col).ok_or_else(|| {
                    Error::Graph(format!("aggregate input column {col} does not exist"))
                })?),
            };
            if let Some(attr) = input_attr {
                let needs_numeric = !spec.kind.accepts_any_kind();
                if needs_numeric && !is_numeric(attr.value_kind) {
                    return Err(Error::Graph(format!(
                        "aggregate {} over {} needs a numeric column, got {}",
                        spec.kind.name(),
                        attr.name,
                        attr.value_kind.name()
                    )));
                }
            }

            let mut dim_of = |col: &str, squared: bool| -> usize {
                if let Some(i) =
                    dims.iter().position(|d| d.column == col && d.squared == squared)
                {
                    return i;
                }
                let attr = input_schema.attribute(col).expect("validated above");
                dims.push(MomentDim {
                    column: col.to_string(),
                    squared,
                    col_idx: input_schema.attribute_index(col).expect("validated above"),
                    mutable_input: attr.mutability == Mutability::Mutable,
                });
                dims.len() - 1
            };

            let binding = match spec.kind {
                AggregateKind::Count => Binding::Count,
                AggregateKind::Sum => Binding::Sum { dim: dim_of(spec.input.as_ref().unwrap(), false) },
                AggregateKind::Avg => Binding::Avg { dim: dim_of(spec.input.as_ref().unwrap(), false) },
                AggregateKind::Var | AggregateKind::StdDev => {
                    let col = spec.input.as_ref().unwrap();
                    let dim = dim_of(col, false);
                    let sq = dim_of(col, true);
                    if spec.kind == AggregateKind::Var {
                        Binding::VarPop { dim, sq }
                    } else {
                        Binding::StdDev { dim, sq }
                    }
                }
                AggregateKind::Min | AggregateKind::Max => {
                    let col = spec.input.as_ref().unwrap();
                    let attr = input_schema.attribute(col).unwrap();
                    n_samples += 1;
                    Binding::Extreme {
                        sample: n_samples - 1,
                        col_idx: input_schema.attribute_index(col).unwrap(),
                        is_min: spec.kind == AggregateKind::Min,
                        kind: attr.value_kind,
                    }
                }
                AggregateKind::CountDistinct => {
                    n_distincts += 1;
                    Binding::Distinct {
                        slot: n_distincts - 1,
                        col_idx: input_schema
                            .attribute_index(spec.input.as_ref().unwrap())
                            .unwrap(),
                    }
                }
                AggregateKind::OrderStat(_) => {
                    n_samples += 1;
                    Binding::Quantile {
                        sample: n_samples - 1,
                        col_idx: input_schema
                            .attribute_index(spec.input.as_ref().unwrap())
                            .unwrap(),
                        q: spec.kind.quantile().unwrap(),
                    }
                }
            };
            bindings.push(binding);
        }
        Ok(AggPlan {
            group_by,
            specs,
            input_schema: input_schema.clone(),
            dims,
            bindings,
            n_samples,
            n_distincts,
        })
    }

    pub fn input_schema(&self) -> &EdfSchema {
        &self.input_schema
    }

    /// Group key columns keep their input kind and become the primary
    /// key. Estimates are float64 (extremes keep their input kind) and
    /// mutable while refining; the exact clustered variant pins every
    /// output constant and clusters the output on the group key.
    pub fn output_schema(&self, clustered: bool) -> Result<EdfSchema> {
        let mut attrs = Vec::new();
        for g in &self.group_by {
            let attr = self.input_schema.attribute(g).expect("validated group key");
            attrs.push(AttributeDef::constant(g.clone(), attr.value_kind));
        }
        let mutability = if clustered { Mutability::Constant } else { Mutability::Mutable };
        for (spec, binding) in self.specs.iter().zip(&self.bindings) {
            let kind = match binding {
                Binding::Extreme { kind, .. } => *kind,
                _ => ValueKind::Float64,
            };
            attrs.push(AttributeDef::new(spec.output.clone(), kind, mutability));
        }
        let ck = clustered.then(|| self.group_by.clone());
        EdfSchema::new(attrs, self.group_by.clone(), ck)
    }

    fn tri(&self, i: usize, j: usize) -> usize {
        let n = self.dims.len();
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + j
    }

    fn tri_len(&self) -> usize {
        self.dims.len() * (self.dims.len() + 1) / 2
    }
}

/// Distinct-value bookkeeping for one group: which values were seen, and
/// per contributing partial, how many values are exclusive to it (the
/// statistic behind the jackknife variance of the observed count).
#[derive(Debug, Clone, PartialEq, Default)]
struct DistinctState {
    values: HashMap<KeyScalar, (u32, bool)>,
    excl_counts: Vec<u64>,
}

impl DistinctState {
    fn new() -> Self {
        // a state is born inside one partial's fold
        DistinctState { values: HashMap::new(), excl_counts: vec![0] }
    }

    fn insert_same_partial(&mut self, v: KeyScalar) {
        let tag = (self.excl_counts.len() - 1) as u32;
        if let Entry::Vacant(e) = self.values.entry(v) {
            e.insert((tag, true));
            self.excl_counts[tag as usize] += 1;
        }
    }

    fn merge(&mut self, other: DistinctState) {
        let offset = self.excl_counts.len() as u32;
        self.excl_counts.extend(other.excl_counts);
        for (v, (btag, bexcl)) in other.values {
            match self.values.entry(v) {
                Entry::Vacant(e) => {
                    e.insert((btag + offset, bexcl));
                }
                Entry::Occupied(mut e) => {
                    let (atag, aexcl) = *e.get();
                    if aexcl {
                        self.excl_counts[atag as usize] -= 1;
                        e.insert((atag, false));
                    }
                    if bexcl {
                        self.excl_counts[(btag + offset) as usize] -= 1;
                    }
                }
            }
        }
    }

    /// Delete-one-partial jackknife of the observed distinct count over
    /// `p` partials (partials that never touched this group count with
    /// zero exclusives). Fewer than two partials carry no signal.
    fn jackknife(&self, p: u64) -> f64 {
        if p < 2 {
            return 0.0;
        }
        let pf = p as f64;
        let total: u64 = self.excl_counts.iter().sum();
        let mean = total as f64 / pf;
        let touched: f64 =
            self.excl_counts.iter().map(|&c| (mean - c as f64).powi(2)).sum();
        let untouched = (p - self.excl_counts.len() as u64) as f64 * mean * mean;
        (pf - 1.0) / pf * (touched + untouched)
    }
}

/// Per-group accumulator: row count, exact sums, co-moments about the
/// mean (upper triangle over the plan's dimensions), propagated input
/// variances, retained samples, and distinct-value state.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub x: u64,
    sums: Vec<f64>,
    com: Vec<f64>,
    input_var: Vec<f64>,
    samples: Vec<Vec<f64>>,
    distincts: Vec<DistinctState>,
}

impl GroupState {
    fn new(plan: &AggPlan) -> Self {
        GroupState {
            x: 0,
            sums: vec![0.0; plan.dims.len()],
            com: vec![0.0; plan.tri_len()],
            input_var: vec![0.0; plan.dims.len()],
            samples: vec![Vec::new(); plan.n_samples],
            distincts: vec![DistinctState::new(); plan.n_distincts],
        }
    }

    fn absorb_row(&mut self, plan: &AggPlan, batch: &EstimateBatch, row: usize) -> Result<()> {
        let n = plan.dims.len();
        let mut vals = Vec::with_capacity(n);
        for dim in &plan.dims {
            let v = batch.rows.columns[dim.col_idx].f64_at(row)?;
            vals.push(if dim.squared { v * v } else { v });
        }
        let means_old: Vec<f64> = if self.x == 0 {
            vals.clone()
        } else {
            self.sums.iter().map(|s| s / self.x as f64).collect()
        };
        self.x += 1;
        for (s, v) in self.sums.iter_mut().zip(&vals) {
            *s += v;
        }
        let xf = self.x as f64;
        for i in 0..n {
            let mean_new_i = self.sums[i] / xf;
            for j in 0..=i {
                // dC = (v_j − m_j_old)·(v_i − m_i_new), symmetric in i, j
                self.com[plan.tri(j, i)] += (vals[j] - means_old[j]) * (vals[i] - mean_new_i);
            }
        }
        for (i, dim) in plan.dims.iter().enumerate() {
            if dim.mutable_input && !dim.squared {
                self.input_var[i] += batch.uncertainty.row_var(&dim.column, row);
            }
        }
        for binding in &plan.bindings {
            match binding {
                Binding::Extreme { sample, col_idx, .. } | Binding::Quantile { sample, col_idx, .. } => {
                    self.samples[*sample].push(batch.rows.columns[*col_idx].f64_at(row)?);
                }
                Binding::Distinct { slot, col_idx } => {
                    let v = batch.rows.columns[*col_idx].value(row).to_key_scalar();
                    self.distincts[*slot].insert_same_partial(v);
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn merge(&mut self, plan: &AggPlan, other: GroupState) {
        if other.x == 0 {
            return;
        }
        if self.x == 0 {
            *self = other;
            return;
        }
        let n = plan.dims.len();
        let xa = self.x as f64;
        let xb = other.x as f64;
        let x = xa + xb;
        let delta: Vec<f64> = (0..n)
            .map(|i| other.sums[i] / xb - self.sums[i] / xa)
            .collect();
        for i in 0..n {
            for j in i..n {
                let idx = plan.tri(i, j);
                self.com[idx] += other.com[idx] + delta[i] * delta[j] * xa * xb / x;
            }
        }
        self.x += other.x;
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        for (s, o) in self.input_var.iter_mut().zip(&other.input_var) {
            *s += o;
        }
        for (s, o) in self.samples.iter_mut().zip(other.samples) {
            s.extend(o);
        }
        for (s, o) in self.distincts.iter_mut().zip(other.distincts) {
            s.merge(o);
        }
    }

    fn sample_var(&self, plan: &AggPlan, dim: usize) -> f64 {
        if self.x < 2 {
            return 0.0;
        }
        self.com[plan.tri(dim, dim)] / (self.x - 1) as f64
    }
}

/// Intrinsic state of an aggregation node: one `GroupState` per group
/// key, plus the number of partials folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct AggState {
    plan: Arc<AggPlan>,
    groups: IndexMap<Key, GroupState>,
    pub n_partials: u64,
}

impl AggState {
    pub fn empty(plan: Arc<AggPlan>) -> AggState {
        AggState { plan, groups: IndexMap::new(), n_partials: 0 }
    }

    /// Folds one partial into a fresh state. Call once per input partial
    /// and combine with `merge_agg` so partial counts stay honest.
    pub fn from_batch(plan: Arc<AggPlan>, batch: &EstimateBatch) -> Result<AggState> {
        let mut state = AggState::empty(plan.clone());
        state.n_partials = 1;
        for row in 0..batch.row_count() {
            let key = batch.rows.key_of_row(&plan.group_by, row)?;
            state
                .groups
                .entry(key)
                .or_insert_with(|| GroupState::new(&plan))
                .absorb_row(&plan, batch, row)?;
        }
        Ok(state)
    }

    pub fn plan(&self) -> &Arc<AggPlan> {
        &self.plan
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn total_rows(&self) -> u64 {
        self.groups.values().map(|g| g.x).sum()
    }

    /// Mean group cardinality x̄, the growth-model observable.
    pub fn mean_cardinality(&self) -> Option<f64> {
        if self.groups.is_empty() {
            return None;
        }
        Some(self.total_rows() as f64 / self.groups.len() as f64)
    }
}

/// Associative combination of two aggregation states over the same plan.
pub fn merge_agg(a: AggState, b: AggState) -> Result<AggState> {
    if a.plan.as_ref() != b.plan.as_ref() {
        return Err(Error::State("merging aggregation states with different plans".into()));
    }
    let mut out = a;
    out.n_partials += b.n_partials;
    for (key, group) in b.groups {
        match out.groups.entry(key) {
            indexmap::map::Entry::Occupied(mut e) => e.get_mut().merge(&out.plan, group),
            indexmap::map::Entry::Vacant(e) => {
                e.insert(group);
            }
        }
    }
    Ok(out)
}

/// FNV-1a over the key scalars; stable across runs, used to give each
/// group an order-independent bootstrap seed.
fn key_hash(key: &Key) -> u64 {
    const PRIME: u64 = 0x100000001b3;
    let mut h: u64 = 0xcbf29ce484222325;
    let eat = |h: &mut u64, bytes: &[u8]| {
        for b in bytes {
            *h ^= *b as u64;
            *h = h.wrapping_mul(PRIME);
        }
    };
    for ks in key {
        match ks {
            KeyScalar::Int(v) => {
                eat(&mut h, &[1]);
                eat(&mut h, &v.to_le_bytes());
            }
            KeyScalar::Bits(v) => {
                eat(&mut h, &[2]);
                eat(&mut h, &v.to_le_bytes());
            }
            KeyScalar::Str(s) => {
                eat(&mut h, &[3]);
                eat(&mut h, s.as_bytes());
            }
        }
    }
    h
}

fn extreme_of(sample: &[f64], is_min: bool) -> f64 {
    debug_assert!(!sample.is_empty());
    sample
        .iter()
        .copied()
        .fold(if is_min { f64::INFINITY } else { f64::NEG_INFINITY }, |acc, v| {
            if is_min {
                acc.min(v)
            } else {
                acc.max(v)
            }
        })
}

fn exact_value(plan: &AggPlan, binding: &Binding, g: &GroupState) -> Value {
    let xf = g.x as f64;
    match binding {
        Binding::Count => Value::Float64(xf),
        Binding::Sum { dim } => Value::Float64(g.sums[*dim]),
        Binding::Avg { dim } => Value::Float64(g.sums[*dim] / xf),
        Binding::VarPop { dim, .. } => Value::Float64(g.com[plan.tri(*dim, *dim)] / xf),
        Binding::StdDev { dim, .. } => {
            Value::Float64((g.com[plan.tri(*dim, *dim)] / xf).max(0.0).sqrt())
        }
        Binding::Extreme { sample, is_min, kind, .. } => {
            let v = extreme_of(&g.samples[*sample], *is_min);
            match kind {
                ValueKind::Int64 => Value::Int64(v as i64),
                _ => Value::Float64(v),
            }
        }
        Binding::Distinct { slot, .. } => Value::Float64(g.distincts[*slot].values.len() as f64),
        Binding::Quantile { sample, q, .. } => {
            let mut sorted = g.samples[*sample].clone();
            sorted.sort_by(f64::total_cmp);
            Value::Float64(quantile_sorted(&sorted, *q))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtrinsicOptions {
    /// Base seed for the bootstrap; combined with a per-group hash.
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for ExtrinsicOptions {
    fn default() -> Self {
        ExtrinsicOptions { seed: 0, bootstrap_resamples: 200 }
    }
}

/// Materializes the estimates implied by `state` at progress `t` under
/// the fitted growth exponent `w`. At t = 1 every cell is the exact batch
/// answer with zero variance; before that, variances carry both the
/// within-group sampling noise and the cardinality-model uncertainty,
/// and count/sum outputs of the same node get covariance entries.
pub fn to_extrinsic(
    state: &AggState,
    t: Progress,
    w: f64,
    var_w: f64,
    opts: &ExtrinsicOptions,
) -> Result<EstimateBatch> {
    let plan = state.plan().clone();
    let schema = plan.output_schema(false)?;
    let sampling = !t.is_final();
    let n_out = plan.bindings.len();

    let mut key_cols: Vec<Column> = plan
        .group_by
        .iter()
        .map(|g| Column::empty(plan.input_schema.attribute(g).unwrap().value_kind))
        .collect();
    let mut out_cols: Vec<Column> = plan
        .specs
        .iter()
        .zip(&plan.bindings)
        .map(|(_, b)| match b {
            Binding::Extreme { kind, .. } => Column::empty(*kind),
            _ => Column::empty(ValueKind::Float64),
        })
        .collect();
    let mut out_vars: Vec<Vec<VarCell>> = vec![Vec::new(); n_out];
    // covariance vectors for count/sum output pairs
    let mut cross: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    if sampling {
        for i in 0..n_out {
            if !matches!(plan.bindings[i], Binding::Count | Binding::Sum { .. }) {
                continue;
            }
            for j in i + 1..n_out {
                if matches!(plan.bindings[j], Binding::Count | Binding::Sum { .. }) {
                    cross.push((i, j, Vec::new()));
                }
            }
        }
    }

    for (key, g) in &state.groups {
        for (col, ks) in key_cols.iter_mut().zip(key) {
            col.push(ks.to_value())?;
        }
        let obs = GroupObservation { x_it: g.x, y_it: 0.0, t };
        let card = estimate_final_cardinality(&obs, w, var_w);
        let xf = g.x as f64;

        for (b_idx, binding) in plan.bindings.iter().enumerate() {
            let (value, variance) = if !sampling {
                (exact_value(&plan, binding, g), 0.0)
            } else {
                match binding {
                    Binding::Count => {
                        let cell = estimate_count(&card);
                        (Value::Float64(cell.value), cell.variance)
                    }
                    Binding::Sum { dim } => {
                        let var_y = xf * g.sample_var(&plan, *dim) + g.input_var[*dim];
                        let cell = estimate_sum(g.sums[*dim], g.x, &card, var_y);
                        (Value::Float64(cell.value), cell.variance)
                    }
                    Binding::Avg { dim } => {
                        let var_num = xf * g.sample_var(&plan, *dim) + g.input_var[*dim];
                        let cell = estimate_weighted_avg(
                            g.sums[*dim],
                            xf,
                            g.x,
                            &card,
                            [[var_num, 0.0], [0.0, 0.0]],
                        )?;
                        (Value::Float64(cell.value), cell.variance)
                    }
                    Binding::VarPop { dim, sq } => {
                        let (value, variance) = var_pop_estimate(&plan, g, *dim, *sq);
                        (Value::Float64(value), variance)
                    }
                    Binding::StdDev { dim, sq } => {
                        let (vp, var_vp) = var_pop_estimate(&plan, g, *dim, *sq);
                        let value = vp.max(0.0).sqrt();
                        let variance = if vp > 0.0 { var_vp / (4.0 * vp) } else { 0.0 };
                        (Value::Float64(value), variance)
                    }
                    Binding::Extreme { sample, col_idx: _, is_min, kind } => {
                        let v = extreme_of(&g.samples[*sample], *is_min);
                        let q = if *is_min { 0.0 } else { 1.0 };
                        let variance = bootstrap_var(
                            &g.samples[*sample],
                            q,
                            opts,
                            key,
                            b_idx,
                        );
                        let value = match kind {
                            ValueKind::Int64 => Value::Int64(v as i64),
                            _ => Value::Float64(v),
                        };
                        (value, variance)
                    }
                    Binding::Distinct { slot, .. } => {
                        let y = g.distincts[*slot].values.len() as u64;
                        // the model never predicts fewer rows than observed
                        let card_cd = CardinalityEstimate {
                            xhat: card.xhat.max(xf),
                            var_xhat: card.var_xhat,
                        };
                        let cell = estimate_count_distinct(y, g.x, &card_cd)?;
                        let var_y = g.distincts[*slot].jackknife(state.n_partials);
                        let variance = if card_cd.xhat == xf {
                            // everything observed: only the jackknife term
                            var_y
                        } else {
                            var_count_distinct(y, g.x, card_cd.xhat, var_y, card_cd.var_xhat)?
                        };
                        (Value::Float64(cell.value), variance)
                    }
                    Binding::Quantile { sample, q, .. } => {
                        let mut sorted = g.samples[*sample].clone();
                        sorted.sort_by(f64::total_cmp);
                        let value = quantile_sorted(&sorted, *q);
                        let variance = bootstrap_var(&g.samples[*sample], *q, opts, key, b_idx);
                        (Value::Float64(value), variance)
                    }
                }
            };
            out_cols[b_idx].push(value)?;
            out_vars[b_idx].push(VarCell::of(variance.max(0.0)));
        }

        for (i, j, values) in cross.iter_mut() {
            values.push(pair_covariance(&plan, g, &card, *i, *j));
        }
    }

    let mut columns = key_cols;
    columns.extend(out_cols);
    let rows = RowBatch::new(schema, columns)?;
    let mut uncertainty = Uncertainty::empty();
    for (spec, vars) in plan.specs.iter().zip(out_vars) {
        uncertainty.vars.insert(spec.output.clone(), vars);
    }
    for (i, j, values) in cross {
        uncertainty.set_cross(&plan.specs[i].output, &plan.specs[j].output, values);
    }
    EstimateBatch::new(rows, t, uncertainty)
}

/// Population variance estimate with its delta-method variance over the
/// sample moments of (v, v²).
fn var_pop_estimate(plan: &AggPlan, g: &GroupState, dim: usize, sq: usize) -> (f64, f64) {
    let xf = g.x as f64;
    let value = g.com[plan.tri(dim, dim)] / xf;
    if g.x < 2 {
        return (value, 0.0);
    }
    let denom = (xf - 1.0) * xf;
    let a = g.sums[dim] / xf;
    let var_a = g.com[plan.tri(dim, dim)] / denom;
    let var_b = g.com[plan.tri(sq, sq)] / denom;
    let cov_ab = g.com[plan.tri(dim, sq)] / denom;
    let variance = (4.0 * a * a * var_a + var_b - 4.0 * a * cov_ab).max(0.0);
    (value, variance)
}

fn bootstrap_var(
    sample: &[f64],
    q: f64,
    opts: &ExtrinsicOptions,
    key: &Key,
    binding_idx: usize,
) -> f64 {
    let seed = opts
        .seed
        .wrapping_add(key_hash(key))
        .wrapping_add((binding_idx as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    initial_variance_order_stat(sample, q, opts.bootstrap_resamples, &mut rng)
}

/// Covariance of two count/sum estimates of the same group: the shared
/// per-row sampling noise scaled to the final cardinality plus the shared
/// cardinality-model uncertainty.
fn pair_covariance(
    plan: &AggPlan,
    g: &GroupState,
    card: &CardinalityEstimate,
    i: usize,
    j: usize,
) -> f64 {
    let xf = g.x as f64;
    let row_cov = |a: &Binding, b: &Binding| -> f64 {
        match (a, b) {
            (Binding::Sum { dim: da }, Binding::Sum { dim: db }) if g.x >= 2 => {
                g.com[plan.tri(*da, *db)] / (xf - 1.0)
            }
            // count's per-row value is the constant 1: no sampling cross
            _ => 0.0,
        }
    };
    let y_of = |b: &Binding| -> f64 {
        match b {
            Binding::Count => xf,
            Binding::Sum { dim } => g.sums[*dim],
            _ => unreachable!("cross pairs are count/sum only"),
        }
    };
    let (bi, bj) = (&plan.bindings[i], &plan.bindings[j]);
    let scale = card.xhat / xf;
    let term_rows = scale * scale * xf * row_cov(bi, bj);
    let (yi, yj) = (y_of(bi), y_of(bj));
    let term_card = if yi == 0.0 || yj == 0.0 {
        0.0
    } else {
        (yi / xf) * (yj / xf) * card.var_xhat
    };
    term_rows + term_card
}

/// True when grouping `input` by `group_by` sees each group as one
/// contiguous run: the group key must be a prefix of the clustering key
/// (order included). Such a node can stream exact results.
pub fn clustered_mode(input: &EdfSchema, group_by: &[String]) -> bool {
    match &input.clustering_key {
        Some(ck) => ck.len() >= group_by.len() && ck[..group_by.len()] == *group_by,
        None => false,
    }
}

/// Exact streaming aggregation over an input clustered on the group key:
/// a group is complete once a later key arrives, so complete groups leave
/// as constant, zero-variance deltas and only the boundary group stays
/// buffered. The final flush (always emitted, possibly empty) carries
/// t = 1.
#[derive(Debug)]
pub struct ClusteredAgg {
    state: AggState,
    out_schema: EdfSchema,
    max_key: Option<Key>,
    progress: Progress,
    done: bool,
}

impl ClusteredAgg {
    pub fn new(plan: Arc<AggPlan>) -> Result<Self> {
        if !clustered_mode(&plan.input_schema, &plan.group_by) {
            return Err(Error::Graph(format!(
                "clustered aggregation needs the group key {:?} to be a prefix of the input clustering key",
                plan.group_by
            )));
        }
        let out_schema = plan.output_schema(true)?;
        Ok(ClusteredAgg {
            state: AggState::empty(plan),
            out_schema,
            max_key: None,
            progress: Progress::start(1),
            done: false,
        })
    }

    pub fn output_schema(&self) -> &EdfSchema {
        &self.out_schema
    }

    pub fn push(&mut self, batch: &EstimateBatch) -> Result<Vec<EstimateBatch>> {
        if self.done {
            return Err(Error::Exec("clustered aggregation received data after close".into()));
        }
        let plan = self.state.plan().clone();
        for row in 0..batch.row_count() {
            let key = batch.rows.key_of_row(&plan.group_by, row)?;
            if self.max_key.as_ref().is_some_and(|max| key < *max) {
                return Err(Error::Exec(format!(
                    "clustered aggregation input violates the ordered-partition contract: key {key:?} arrived after {:?}",
                    self.max_key.as_ref().unwrap()
                )));
            }
            self.max_key = Some(key);
        }
        self.progress = batch.progress;
        let partial = AggState::from_batch(plan, batch)?;
        let mut merged = merge_agg(std::mem::replace(
            &mut self.state,
            AggState::empty(partial.plan().clone()),
        ), partial)?;

        // groups strictly below the stream's max key are complete
        let complete = match &self.max_key {
            None => 0,
            Some(max) => merged.groups.iter().take_while(|(k, _)| *k < max).count(),
        };
        let rest = merged.groups.split_off(complete);
        let emitted = std::mem::replace(&mut merged.groups, rest);
        self.state = merged;
        if emitted.is_empty() {
            return Ok(Vec::new());
        }
        Ok(vec![self.materialize(emitted.iter(), batch.progress)?])
    }

    pub fn close(&mut self) -> Result<Vec<EstimateBatch>> {
        self.done = true;
        let t = Progress::final_over(self.progress.total);
        let groups = std::mem::take(&mut self.state.groups);
        Ok(vec![self.materialize(groups.iter(), t)?])
    }

    fn materialize<'a>(
        &self,
        groups: impl Iterator<Item = (&'a Key, &'a GroupState)>,
        t: Progress,
    ) -> Result<EstimateBatch> {
        let plan = self.state.plan();
        let mut key_cols: Vec<Column> = plan
            .group_by
            .iter()
            .map(|g| Column::empty(plan.input_schema.attribute(g).unwrap().value_kind))
            .collect();
        let mut out_cols: Vec<Column> = plan
            .bindings
            .iter()
            .map(|b| match b {
                Binding::Extreme { kind, .. } => Column::empty(*kind),
                _ => Column::empty(ValueKind::Float64),
            })
            .collect();
        for (key, g) in groups {
            for (col, ks) in key_cols.iter_mut().zip(key) {
                col.push(ks.to_value())?;
            }
            for (col, binding) in out_cols.iter_mut().zip(&plan.bindings) {
                col.push(exact_value(plan, binding, g))?;
            }
        }
        let mut columns = key_cols;
        columns.extend(out_cols);
        let rows = RowBatch::new(self.out_schema.clone(), columns)?;
        Ok(EstimateBatch::exact(rows, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn base_schema(mutable_v: bool) -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("id", ValueKind::Int64),
                AttributeDef::constant("state", ValueKind::Utf8),
                AttributeDef::new(
                    "v",
                    ValueKind::Float64,
                    if mutable_v { Mutability::Mutable } else { Mutability::Constant },
                ),
            ],
            vec!["id".into()],
            None,
        )
        .unwrap()
    }

    fn make_batch(rows: &[(i64, &str, f64)], t: Progress) -> EstimateBatch {
        make_batch_with_vars(rows, t, None)
    }

    fn make_batch_with_vars(
        rows: &[(i64, &str, f64)],
        t: Progress,
        vars: Option<Vec<f64>>,
    ) -> EstimateBatch {
        let schema = base_schema(vars.is_some());
        let batch = RowBatch::new(
            schema,
            vec![
                Column::Int64(rows.iter().map(|r| r.0).collect()),
                Column::Utf8(rows.iter().map(|r| r.1.to_string()).collect()),
                Column::Float64(rows.iter().map(|r| r.2).collect()),
            ],
        )
        .unwrap();
        let mut b = EstimateBatch::exact(batch, t);
        if let Some(vars) = vars {
            b.uncertainty
                .vars
                .insert("v".into(), vars.into_iter().map(VarCell::of).collect());
        }
        b
    }

    fn count_plan() -> Arc<AggPlan> {
        Arc::new(
            AggPlan::new(
                &base_schema(false),
                vec!["state".into()],
                vec![AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() }],
            )
            .unwrap(),
        )
    }

    fn group_value(batch: &EstimateBatch, key: &str, col: &str) -> Value {
        for row in 0..batch.row_count() {
            if let Value::Utf8(s) = batch.rows.column("state").unwrap().value(row) {
                if s == key {
                    return batch.rows.column(col).unwrap().value(row);
                }
            }
        }
        panic!("group {key} not found");
    }

    #[test]
    fn plan_validation() {
        let schema = base_schema(false);
        assert!(AggPlan::new(&schema, vec!["nope".into()], vec![]).is_err());
        assert!(AggPlan::new(
            &schema,
            vec!["state".into()],
            vec![AggSpec { kind: AggregateKind::Sum, input: None, output: "s".into() }]
        )
        .is_err());
        assert!(AggPlan::new(
            &schema,
            vec!["state".into()],
            vec![AggSpec {
                kind: AggregateKind::Sum,
                input: Some("state".into()),
                output: "s".into()
            }]
        )
        .is_err(), "sum over a string column");
        assert!(AggPlan::new(
            &schema,
            vec!["state".into()],
            vec![AggSpec { kind: AggregateKind::Count, input: None, output: "state".into() }]
        )
        .is_err(), "output collides with group key");

        let plan = AggPlan::new(
            &base_schema(false),
            vec!["state".into()],
            vec![
                AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() },
                AggSpec { kind: AggregateKind::Sum, input: Some("v".into()), output: "s".into() },
            ],
        )
        .unwrap();
        let out = plan.output_schema(false).unwrap();
        assert_eq!(out.primary_key, vec!["state".to_string()]);
        assert_eq!(out.attribute("n").unwrap().mutability, Mutability::Mutable);
        assert_eq!(out.clustering_key, None);
        let exact = plan.output_schema(true).unwrap();
        assert_eq!(exact.attribute("n").unwrap().mutability, Mutability::Constant);
        assert_eq!(exact.clustering_key, Some(vec!["state".to_string()]));
    }

    #[test]
    fn merge_combines_group_counts() {
        let plan = count_plan();
        // two partials of a states table: counts add per key
        let a = AggState::from_batch(
            plan.clone(),
            &make_batch(&[(1, "IL", 0.0), (2, "IL", 0.0), (3, "MI", 0.0)], Progress::new(1, 2)),
        )
        .unwrap();
        let b = AggState::from_batch(
            plan.clone(),
            &make_batch(&[(4, "IL", 0.0), (5, "MI", 0.0)], Progress::new(2, 2)),
        )
        .unwrap();
        let merged = merge_agg(a, b).unwrap();
        assert_eq!(merged.n_partials, 2);
        let out = to_extrinsic(&merged, Progress::final_over(2), 1.0, 0.0, &Default::default())
            .unwrap();
        assert_eq!(group_value(&out, "IL", "n"), Value::Float64(3.0));
        assert_eq!(group_value(&out, "MI", "n"), Value::Float64(2.0));
    }

    #[test]
    fn merge_identity_is_empty_state() {
        let plan = count_plan();
        let s = AggState::from_batch(
            plan.clone(),
            &make_batch(&[(1, "IL", 0.0)], Progress::new(1, 1)),
        )
        .unwrap();
        let merged = merge_agg(AggState::empty(plan), s.clone()).unwrap();
        assert_eq!(merged.groups, s.groups);
    }

    #[test]
    fn counts_scale_by_inverse_progress() {
        // observed counts [(IL,3),(MI,2)] at t=0.2 under linear growth
        let plan = count_plan();
        let state = AggState::from_batch(
            plan,
            &make_batch(
                &[(1, "IL", 0.0), (2, "IL", 0.0), (3, "IL", 0.0), (4, "MI", 0.0), (5, "MI", 0.0)],
                Progress::new(1, 5),
            ),
        )
        .unwrap();
        let out = to_extrinsic(&state, Progress::new(1, 5), 1.0, 0.0, &Default::default()).unwrap();
        assert_eq!(group_value(&out, "IL", "n"), Value::Float64(15.0));
        assert_eq!(group_value(&out, "MI", "n"), Value::Float64(10.0));
        assert_eq!(out.uncertainty.row_var("n", 0), 0.0, "var_w = 0 means exact scaling");
    }

    fn full_plan() -> Arc<AggPlan> {
        Arc::new(
            AggPlan::new(
                &base_schema(false),
                vec!["state".into()],
                vec![
                    AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() },
                    AggSpec { kind: AggregateKind::Sum, input: Some("v".into()), output: "s".into() },
                    AggSpec { kind: AggregateKind::Avg, input: Some("v".into()), output: "a".into() },
                    AggSpec { kind: AggregateKind::Var, input: Some("v".into()), output: "vr".into() },
                    AggSpec {
                        kind: AggregateKind::StdDev,
                        input: Some("v".into()),
                        output: "sd".into(),
                    },
                    AggSpec { kind: AggregateKind::Min, input: Some("v".into()), output: "lo".into() },
                    AggSpec { kind: AggregateKind::Max, input: Some("v".into()), output: "hi".into() },
                    AggSpec {
                        kind: AggregateKind::CountDistinct,
                        input: Some("v".into()),
                        output: "d".into(),
                    },
                    AggSpec {
                        kind: crate::inference::order_stat(0.5),
                        input: Some("v".into()),
                        output: "med".into(),
                    },
                ],
            )
            .unwrap(),
        )
    }

    /// Independent oracle: single-pass aggregation over the union of rows.
    fn union_oracle(rows: &[(i64, &str, f64)], key: &str) -> (f64, f64, f64, f64, f64, f64, f64) {
        let vals: Vec<f64> = rows.iter().filter(|r| r.1 == key).map(|r| r.2).collect();
        let n = vals.len() as f64;
        let sum: f64 = vals.iter().sum();
        let mean = sum / n;
        let pop_var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut bits: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
        bits.sort();
        bits.dedup();
        (n, sum, mean, pop_var, lo, hi, bits.len() as f64)
    }

    proptest! {
        #[test]
        fn merged_finals_match_union_oracle(
            raw in proptest::collection::vec((0..3u8, -100i64..100), 1..60),
            cuts in proptest::collection::vec(0.0f64..1.0, 2),
        ) {
            // well-conditioned values: half-integers in a narrow range
            let rows: Vec<(i64, String, f64)> = raw
                .iter()
                .enumerate()
                .map(|(i, (k, v))| (i as i64, format!("g{k}"), *v as f64 / 2.0))
                .collect();
            let rows_ref: Vec<(i64, &str, f64)> =
                rows.iter().map(|(i, k, v)| (*i, k.as_str(), *v)).collect();
            let c1 = (cuts[0] * rows.len() as f64) as usize;
            let c2 = c1 + (cuts[1] * (rows.len() - c1) as f64) as usize;

            let plan = full_plan();
            let total = rows.len() as u64;
            let mut state = AggState::empty(plan.clone());
            for part in [&rows_ref[..c1], &rows_ref[c1..c2], &rows_ref[c2..]] {
                let b = make_batch(part, Progress::new(1, 1));
                state =
                    merge_agg(state, AggState::from_batch(plan.clone(), &b).unwrap()).unwrap();
            }
            let out = to_extrinsic(
                &state,
                Progress::final_over(total.max(1)),
                1.0,
                0.0,
                &Default::default(),
            )
            .unwrap();

            let mut keys: Vec<&str> = rows_ref.iter().map(|r| r.1).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                let (n, sum, mean, pop_var, lo, hi, distinct) = union_oracle(&rows_ref, key);
                prop_assert_eq!(group_value(&out, key, "n"), Value::Float64(n));
                let got_sum = match group_value(&out, key, "s") { Value::Float64(v) => v, _ => unreachable!() };
                prop_assert!((got_sum - sum).abs() <= 1e-9 * sum.abs().max(1.0));
                let got_avg = match group_value(&out, key, "a") { Value::Float64(v) => v, _ => unreachable!() };
                prop_assert!((got_avg - mean).abs() <= 1e-9 * mean.abs().max(1.0));
                let got_var = match group_value(&out, key, "vr") { Value::Float64(v) => v, _ => unreachable!() };
                prop_assert!((got_var - pop_var).abs() <= 1e-9 * pop_var.abs().max(1.0));
                let got_sd = match group_value(&out, key, "sd") { Value::Float64(v) => v, _ => unreachable!() };
                prop_assert!((got_sd - pop_var.sqrt()).abs() <= 1e-9 * pop_var.sqrt().max(1.0));
                prop_assert_eq!(group_value(&out, key, "lo"), Value::Float64(lo));
                prop_assert_eq!(group_value(&out, key, "hi"), Value::Float64(hi));
                prop_assert_eq!(group_value(&out, key, "d"), Value::Float64(distinct));
                // every cell is exact at t = 1
                for col in ["n", "s", "a", "vr", "sd", "lo", "hi", "d", "med"] {
                    let row = (0..out.row_count())
                        .find(|r| matches!(out.rows.column("state").unwrap().value(*r), Value::Utf8(ref s) if s == key))
                        .unwrap();
                    prop_assert_eq!(out.uncertainty.row_var(col, row), 0.0);
                }
            }
        }

        #[test]
        fn merge_is_associative(
            a in proptest::collection::vec((0..3u8, -50i64..50), 0..20),
            b in proptest::collection::vec((0..3u8, -50i64..50), 0..20),
            c in proptest::collection::vec((0..3u8, -50i64..50), 0..20),
        ) {
            let plan = full_plan();
            let mk = |rows: &[(u8, i64)], base: i64| -> AggState {
                let rows: Vec<(i64, String, f64)> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, (k, v))| (base + i as i64, format!("g{k}"), *v as f64 / 2.0))
                    .collect();
                let rows_ref: Vec<(i64, &str, f64)> =
                    rows.iter().map(|(i, k, v)| (*i, k.as_str(), *v)).collect();
                AggState::from_batch(plan.clone(), &make_batch(&rows_ref, Progress::new(1, 3)))
                    .unwrap()
            };
            let (sa, sb, sc) = (mk(&a, 0), mk(&b, 1000), mk(&c, 2000));
            let left = merge_agg(merge_agg(sa.clone(), sb.clone()).unwrap(), sc.clone()).unwrap();
            let right = merge_agg(sa, merge_agg(sb, sc).unwrap()).unwrap();

            prop_assert_eq!(left.n_partials, right.n_partials);
            prop_assert_eq!(left.groups.len(), right.groups.len());
            for (key, gl) in &left.groups {
                let gr = &right.groups[key];
                prop_assert_eq!(gl.x, gr.x);
                for (l, r) in gl.sums.iter().zip(&gr.sums) {
                    prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(1.0));
                }
                for (l, r) in gl.com.iter().zip(&gr.com) {
                    prop_assert!((l - r).abs() <= 1e-7 * l.abs().max(1.0));
                }
                let mut dl: Vec<&KeyScalar> = gl.distincts[0].values.keys().collect();
                let mut dr: Vec<&KeyScalar> = gr.distincts[0].values.keys().collect();
                dl.sort();
                dr.sort();
                prop_assert_eq!(dl, dr);
                prop_assert_eq!(&gl.distincts[0].excl_counts, &gr.distincts[0].excl_counts);
                prop_assert_eq!(&gl.samples[0], &gr.samples[0]);
            }
        }
    }

    #[test]
    fn moment_merge_matches_two_pass_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..50usize);
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let cut = rng.random_range(0..=n);
            let rows: Vec<(i64, &str, f64)> =
                vals.iter().enumerate().map(|(i, v)| (i as i64, "g", *v)).collect();

            let plan = full_plan();
            let a = AggState::from_batch(plan.clone(), &make_batch(&rows[..cut], Progress::new(1, 2)))
                .unwrap();
            let b = AggState::from_batch(plan.clone(), &make_batch(&rows[cut..], Progress::new(2, 2)))
                .unwrap();
            let merged = merge_agg(a, b).unwrap();
            let g = &merged.groups[&vec![KeyScalar::Str("g".into())]];

            let mean = vals.iter().sum::<f64>() / n as f64;
            let m2: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
            assert_relative_eq!(g.com[plan.tri(0, 0)], m2, max_relative = 1e-9, epsilon = 1e-9);
        }
    }

    #[test]
    fn jackknife_counts_exclusive_values() {
        let mut d = DistinctState::new();
        for v in ["a", "b", "c"] {
            d.insert_same_partial(KeyScalar::Str(v.into()));
        }
        let mut d2 = DistinctState::new();
        for v in ["b", "d"] {
            d2.insert_same_partial(KeyScalar::Str(v.into()));
        }
        d.merge(d2);
        // exclusives: {a, c} in partial 0, {d} in partial 1
        assert_eq!(d.excl_counts, vec![2, 1]);
        assert_eq!(d.values.len(), 4);
        // jackknife over p=2: mean 1.5, SS = 0.5, scaled by (p−1)/p
        assert_relative_eq!(d.jackknife(2), 0.25);
        assert_eq!(d.jackknife(1), 0.0);
        // a third partial that never touched the group adds (1−0)²·2/3 style terms
        let jk3 = d.jackknife(3);
        assert!(jk3 > 0.0);
    }

    #[test]
    fn sum_variance_includes_input_variance() {
        let plan = Arc::new(
            AggPlan::new(
                &base_schema(true),
                vec!["state".into()],
                vec![AggSpec {
                    kind: AggregateKind::Sum,
                    input: Some("v".into()),
                    output: "s".into(),
                }],
            )
            .unwrap(),
        );
        let rows = [(1, "IL", 2.0), (2, "IL", 2.0), (3, "IL", 2.0)];
        let b = make_batch_with_vars(&rows, Progress::new(1, 2), Some(vec![2.0, 2.0, 2.0]));
        let state = AggState::from_batch(plan, &b).unwrap();
        let out = to_extrinsic(&state, Progress::new(1, 2), 1.0, 0.0, &Default::default()).unwrap();
        // identical values: s² = 0, so Var(y) is pure input variance 6;
        // x̂ = 6 doubles the sum and scales the variance by (x̂/x)² = 4
        assert_eq!(group_value(&out, "IL", "s"), Value::Float64(12.0));
        assert_relative_eq!(out.uncertainty.row_var("s", 0), 6.0 * 4.0);
    }

    #[test]
    fn count_sum_covariance_is_consistent() {
        let plan = Arc::new(
            AggPlan::new(
                &base_schema(false),
                vec!["state".into()],
                vec![
                    AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() },
                    AggSpec { kind: AggregateKind::Sum, input: Some("v".into()), output: "s".into() },
                ],
            )
            .unwrap(),
        );
        let rows = [(1, "IL", 3.0), (2, "IL", 5.0)];
        let state =
            AggState::from_batch(plan, &make_batch(&rows, Progress::new(1, 4))).unwrap();
        // nonzero var_w so the shared cardinality channel is live
        let out = to_extrinsic(&state, Progress::new(1, 4), 1.0, 0.01, &Default::default()).unwrap();
        let c = out.uncertainty.row_cross("n", "s", 0);
        // Cov(x̂, (y/x)x̂) = (y/x)·Var(x̂)
        let var_n = out.uncertainty.row_var("n", 0);
        assert_relative_eq!(c, 4.0 * var_n, max_relative = 1e-9);
        // and the pair satisfies Cauchy-Schwarz (validated on construction)
        out.uncertainty.validate(&out.rows).unwrap();
    }

    #[test]
    fn bootstrap_variances_are_deterministic() {
        let plan = full_plan();
        let rows: Vec<(i64, &str, f64)> =
            (0..40).map(|i| (i, "IL", (i as f64 * 0.37).sin() * 5.0)).collect();
        let state =
            AggState::from_batch(plan, &make_batch(&rows, Progress::new(1, 2))).unwrap();
        let a = to_extrinsic(&state, Progress::new(1, 2), 1.0, 0.0, &Default::default()).unwrap();
        let b = to_extrinsic(&state, Progress::new(1, 2), 1.0, 0.0, &Default::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.uncertainty.row_var("med", 0) > 0.0);
        assert!(a.uncertainty.row_var("lo", 0) > 0.0);
    }

    #[test]
    fn scalar_aggregation_uses_the_empty_key() {
        let plan = Arc::new(
            AggPlan::new(
                &base_schema(false),
                vec![],
                vec![AggSpec { kind: AggregateKind::Sum, input: Some("v".into()), output: "s".into() }],
            )
            .unwrap(),
        );
        let rows = [(1, "IL", 1.5), (2, "MI", 2.5)];
        let state =
            AggState::from_batch(plan.clone(), &make_batch(&rows, Progress::final_over(1))).unwrap();
        let out =
            to_extrinsic(&state, Progress::final_over(1), 1.0, 0.0, &Default::default()).unwrap();
        assert_eq!(out.row_count(), 1);
        assert_eq!(out.rows.column("s").unwrap().f64_at(0).unwrap(), 4.0);
        assert!(out.rows.schema.primary_key.is_empty());

        // no rows at all: no groups, empty output
        let empty = AggState::empty(plan);
        let out =
            to_extrinsic(&empty, Progress::final_over(1), 1.0, 0.0, &Default::default()).unwrap();
        assert_eq!(out.row_count(), 0);
    }

    fn clustered_schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("id", ValueKind::Int64),
                AttributeDef::constant("k", ValueKind::Int64),
                AttributeDef::constant("v", ValueKind::Float64),
            ],
            vec!["id".into()],
            Some(vec!["k".into()]),
        )
        .unwrap()
    }

    fn clustered_batch(rows: &[(i64, i64, f64)], t: Progress) -> EstimateBatch {
        EstimateBatch::exact(
            RowBatch::new(
                clustered_schema(),
                vec![
                    Column::Int64(rows.iter().map(|r| r.0).collect()),
                    Column::Int64(rows.iter().map(|r| r.1).collect()),
                    Column::Float64(rows.iter().map(|r| r.2).collect()),
                ],
            )
            .unwrap(),
            t,
        )
    }

    #[test]
    fn clustered_agg_emits_complete_groups_exactly_once() {
        let plan = Arc::new(
            AggPlan::new(
                &clustered_schema(),
                vec!["k".into()],
                vec![
                    AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() },
                    AggSpec { kind: AggregateKind::Sum, input: Some("v".into()), output: "s".into() },
                ],
            )
            .unwrap(),
        );
        let mut agg = ClusteredAgg::new(plan).unwrap();
        assert_eq!(agg.output_schema().clustering_key, Some(vec!["k".to_string()]));

        // group 2 spans the partial boundary: held back until key 3 shows up
        let out1 = agg
            .push(&clustered_batch(&[(1, 1, 1.0), (2, 1, 2.0), (3, 2, 4.0)], Progress::new(1, 2)))
            .unwrap();
        assert_eq!(out1.len(), 1);
        assert_eq!(out1[0].row_count(), 1, "only group 1 is complete");
        assert_eq!(out1[0].rows.column("s").unwrap().f64_at(0).unwrap(), 3.0);
        assert!(!out1[0].progress.is_final());

        let out2 = agg
            .push(&clustered_batch(&[(4, 2, 8.0), (5, 3, 1.0)], Progress::new(2, 2)))
            .unwrap();
        assert_eq!(out2[0].row_count(), 1, "group 2 completes when key 3 arrives");
        assert_eq!(out2[0].rows.column("s").unwrap().f64_at(0).unwrap(), 12.0);

        let fin = agg.close().unwrap();
        assert_eq!(fin.len(), 1);
        assert!(fin[0].progress.is_final());
        assert_eq!(fin[0].rows.column("s").unwrap().f64_at(0).unwrap(), 1.0);
        // constant schema: no uncertainty entries at all
        assert!(fin[0].uncertainty.vars.is_empty());
    }

    #[test]
    fn clustered_agg_enforces_order_and_key_match() {
        let plan = Arc::new(
            AggPlan::new(
                &clustered_schema(),
                vec!["k".into()],
                vec![AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() }],
            )
            .unwrap(),
        );
        let mut agg = ClusteredAgg::new(plan).unwrap();
        agg.push(&clustered_batch(&[(1, 5, 0.0)], Progress::new(1, 2))).unwrap();
        assert!(agg.push(&clustered_batch(&[(2, 3, 0.0)], Progress::new(2, 2))).is_err());

        // group key not equal to the clustering key
        let plan = Arc::new(
            AggPlan::new(
                &clustered_schema(),
                vec!["id".into()],
                vec![AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() }],
            )
            .unwrap(),
        );
        assert!(ClusteredAgg::new(plan).is_err());
    }

    #[test]
    fn empty_close_still_signals_completion() {
        let plan = Arc::new(
            AggPlan::new(
                &clustered_schema(),
                vec!["k".into()],
                vec![AggSpec { kind: AggregateKind::Count, input: None, output: "n".into() }],
            )
            .unwrap(),
        );
        let mut agg = ClusteredAgg::new(plan).unwrap();
        let fin = agg.close().unwrap();
        assert_eq!(fin.len(), 1);
        assert_eq!(fin[0].row_count(), 0);
        assert!(fin[0].progress.is_final());
    }
}
