//! Query-graph construction and execution: one thread per operator, bounded
//! channels between them, deltas and refreshes flowing toward a sink that
//! snapshots the refining answer.
//!
//! Update modes: table scans, merge joins, and ordered aggregations emit
//! key-disjoint deltas; growth aggregations, sorts, and filters over mutable
//! attributes emit full refreshes of their current answer. Maps, filters
//! over constant attributes, and the probe side of a hash join preserve
//! whichever mode flows through them. The sink accumulates either kind into
//! the materialized state it snapshots, so both runners agree bit for bit
//! on everything except wall-clock timings.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use indexmap::IndexMap;

use crate::confidence::{chebyshev_interval, ConfidenceInterval};
use crate::edf::{EdfSchema, Progress, RowBatch, ValueKind};
use crate::error::Error;
use crate::Result;
use crate::inference::GrowthModel;
use crate::ops::{
    apply_filter, apply_map, clustered_mode, hash_join, join_output_schema, key_rules,
    map_output_schema, merge_agg, shuffle_without_inference, sort_limit, to_extrinsic, AggPlan,
    AggSpec, AggState, BuiltIndex, ClusteredAgg, EstimateBatch, ExtrinsicOptions, JoinMethod,
    JoinSpec, KeyOp, MapFunc, MergeJoin, Predicate, SortKey, Uncertainty,
};

/// Channel capacity between adjacent operators. Small enough that a fast
/// producer blocks instead of buffering the whole table, which is what
/// keeps the pipeline streaming.
const CHANNEL_DEPTH: usize = 4;

/// How a message's batch relates to the consumer's accumulated state.
#[derive(Debug, Clone)]
pub enum StateUpdate {
    /// Key-disjoint rows that append to everything seen so far.
    Delta(Arc<EstimateBatch>),
    /// A full replacement of the producer's current answer.
    Refresh(Arc<EstimateBatch>),
}

impl StateUpdate {
    pub fn batch(&self) -> &Arc<EstimateBatch> {
        match self {
            StateUpdate::Delta(b) | StateUpdate::Refresh(b) => b,
        }
    }

    pub fn progress(&self) -> Progress {
        self.batch().progress
    }

    /// Wraps `batch` in the same mode as `self`; local operators keep the
    /// incoming mode because they transform rows one for one.
    fn rewrap(&self, batch: EstimateBatch) -> StateUpdate {
        match self {
            StateUpdate::Delta(_) => StateUpdate::Delta(Arc::new(batch)),
            StateUpdate::Refresh(_) => StateUpdate::Refresh(Arc::new(batch)),
        }
    }
}

/// One unit of inter-operator flow: a state update plus the index of the
/// source partition whose arrival triggered it (carried for the trace log).
#[derive(Debug, Clone)]
pub struct Message {
    pub update: StateUpdate,
    pub partition: usize,
}

enum Packet {
    Data(Message),
    Eof,
}

/// Logical operator of a query-graph node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Read { table: String },
    Map { func: MapFunc },
    Filter { predicate: Predicate },
    Join { spec: JoinSpec },
    Agg { group_by: Vec<String>, aggs: Vec<AggSpec> },
    SortLimit { keys: Vec<SortKey>, limit: usize },
}

impl NodeKind {
    fn arity(&self) -> usize {
        match self {
            NodeKind::Read { .. } => 0,
            NodeKind::Join { .. } => 2,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            NodeKind::Read { .. } => "read",
            NodeKind::Map { .. } => "map",
            NodeKind::Filter { .. } => "filter",
            NodeKind::Join { .. } => "join",
            NodeKind::Agg { .. } => "agg",
            NodeKind::SortLimit { .. } => "sort_limit",
        }
    }
}

/// One node of an unvalidated query description: an id, an operator, and
/// the ids of the producers feeding each input slot (slot = position; a
/// join reads its probe side from slot 0 and its build side from slot 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
}

/// An unvalidated query: nodes in any order plus the id of the node whose
/// output stream the sink snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub sink: String,
}

/// Physical operator selected for a node during validation.
#[derive(Debug)]
enum PlannedOp {
    Read { table: String },
    Map { func: MapFunc },
    FilterLocal { predicate: Predicate },
    FilterShuffle { predicate: Predicate },
    HashJoin { spec: JoinSpec },
    MergeJoin { spec: JoinSpec },
    GrowthAgg { plan: Arc<AggPlan> },
    ClusteredAgg { plan: Arc<AggPlan> },
    SortLimit { keys: Vec<SortKey>, limit: usize },
}

/// A validated node: physical operator, resolved input indices, and the
/// statically derived output schema.
#[derive(Debug)]
struct PlannedNode {
    id: String,
    op: PlannedOp,
    inputs: Vec<usize>,
    schema: EdfSchema,
}

/// A validated operator tree. Nodes are stored in topological order, so
/// every input index is smaller than the node's own index.
#[derive(Debug)]
pub struct QueryGraph {
    nodes: Vec<PlannedNode>,
    sink: usize,
}

impl QueryGraph {
    /// Schema of the stream the sink snapshots.
    pub fn sink_schema(&self) -> &EdfSchema {
        &self.nodes[self.sink].schema
    }

    /// Names of the tables the graph reads, in node order.
    pub fn read_tables(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                PlannedOp::Read { table } => Some(table.as_str()),
                _ => None,
            })
            .collect()
    }

    /// One `id: operator` line per node, inputs resolved to ids.
    pub fn describe(&self) -> Vec<String> {
        self.nodes
            .iter()
            .map(|n| {
                let op = match &n.op {
                    PlannedOp::Read { table } => format!("read {table}"),
                    PlannedOp::Map { .. } => "map".into(),
                    PlannedOp::FilterLocal { .. } => "filter".into(),
                    PlannedOp::FilterShuffle { .. } => "filter (refilters on refresh)".into(),
                    PlannedOp::HashJoin { .. } => "hash join".into(),
                    PlannedOp::MergeJoin { .. } => "merge join".into(),
                    PlannedOp::GrowthAgg { .. } => "aggregation (growth inference)".into(),
                    PlannedOp::ClusteredAgg { .. } => "aggregation (ordered, exact)".into(),
                    PlannedOp::SortLimit { limit, .. } => format!("sort limit {limit}"),
                };
                let inputs: Vec<&str> =
                    n.inputs.iter().map(|&i| self.nodes[i].id.as_str()).collect();
                if inputs.is_empty() {
                    format!("{}: {}", n.id, op)
                } else {
                    format!("{}: {} <- {}", n.id, op, inputs.join(", "))
                }
            })
            .collect()
    }
}

/// True when rows ordered by `clustering_key` are also ordered by `cols`,
/// which is what lets a merge join consume the stream directly.
fn ordered_by(schema: &EdfSchema, cols: &[String]) -> bool {
    match &schema.clustering_key {
        Some(ck) => cols.len() <= ck.len() && ck[..cols.len()] == *cols,
        None => false,
    }
}

/// Validates a query description against the table schemas and plans each
/// node's physical operator. Errors on cycles, arity mismatches, fan-out
/// (every node feeds exactly one consumer), unknown tables, and references
/// to unknown attributes.
pub fn build_graph(spec: &GraphSpec, tables: &IndexMap<String, EdfSchema>) -> Result<QueryGraph> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, node) in spec.nodes.iter().enumerate() {
        if index.insert(node.id.as_str(), i).is_some() {
            return Err(Error::Graph(format!("node {} appears twice", node.id)));
        }
    }
    let sink = *index
        .get(spec.sink.as_str())
        .ok_or_else(|| Error::Graph(format!("sink references unknown node {}", spec.sink)))?;

    let mut consumers = vec![0usize; spec.nodes.len()];
    let mut inputs: Vec<Vec<usize>> = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let arity = node.kind.arity();
        if node.inputs.len() != arity {
            return Err(Error::Graph(format!(
                "{} takes {} input(s), node {} has {}",
                node.kind.name(),
                arity,
                node.id,
                node.inputs.len()
            )));
        }
        let mut resolved = Vec::with_capacity(arity);
        for input in &node.inputs {
            let i = *index.get(input.as_str()).ok_or_else(|| {
                Error::Graph(format!("node {} reads unknown node {input}", node.id))
            })?;
            consumers[i] += 1;
            resolved.push(i);
        }
        inputs.push(resolved);
    }
    for (i, node) in spec.nodes.iter().enumerate() {
        let expected = usize::from(i != sink);
        if consumers[i] > expected {
            return Err(Error::Graph(format!(
                "node {} feeds more than one consumer; the graph must be a tree",
                node.id
            )));
        }
    }

    // depth-first walk from the sink: detects cycles, orphans, and yields a
    // topological order in one pass
    let mut mark = vec![0u8; spec.nodes.len()]; // 0 new, 1 in progress, 2 done
    let mut order = Vec::with_capacity(spec.nodes.len());
    let mut stack = vec![(sink, 0usize)];
    mark[sink] = 1;
    while let Some((node, next_input)) = stack.pop() {
        match inputs[node].get(next_input) {
            Some(&input) => {
                stack.push((node, next_input + 1));
                match mark[input] {
                    0 => {
                        mark[input] = 1;
                        stack.push((input, 0));
                    }
                    1 => {
                        return Err(Error::Graph(format!(
                            "query graph has a cycle through {}",
                            spec.nodes[input].id
                        )))
                    }
                    _ => {}
                }
            }
            None => {
                mark[node] = 2;
                order.push(node);
            }
        }
    }
    if let Some(i) = (0..spec.nodes.len()).find(|&i| mark[i] != 2) {
        return Err(Error::Graph(format!(
            "node {} does not feed the sink",
            spec.nodes[i].id
        )));
    }

    let mut position = vec![usize::MAX; spec.nodes.len()];
    for (new_idx, &old_idx) in order.iter().enumerate() {
        position[old_idx] = new_idx;
    }

    let mut nodes: Vec<PlannedNode> = Vec::with_capacity(order.len());
    for &old_idx in &order {
        let node = &spec.nodes[old_idx];
        let resolved: Vec<usize> = inputs[old_idx].iter().map(|&i| position[i]).collect();
        let input_schemas: Vec<&EdfSchema> =
            resolved.iter().map(|&i| &nodes[i].schema).collect();
        let (op, schema) = plan_node(node, &input_schemas, tables)?;
        nodes.push(PlannedNode { id: node.id.clone(), op, inputs: resolved, schema });
    }
    Ok(QueryGraph { nodes, sink: position[sink] })
}

fn plan_node(
    node: &NodeSpec,
    inputs: &[&EdfSchema],
    tables: &IndexMap<String, EdfSchema>,
) -> Result<(PlannedOp, EdfSchema)> {
    match &node.kind {
        NodeKind::Read { table } => {
            let schema = tables
                .get(table)
                .ok_or_else(|| Error::Graph(format!("node {} reads unknown table {table}", node.id)))?;
            Ok((PlannedOp::Read { table: table.clone() }, schema.clone()))
        }
        NodeKind::Map { func } => {
            let schema = map_output_schema(inputs[0], func)?;
            Ok((PlannedOp::Map { func: func.clone() }, schema))
        }
        NodeKind::Filter { predicate } => {
            predicate.validate(inputs[0])?;
            let (pk, ck) = key_rules(KeyOp::Filter, inputs)?;
            if predicate.references_mutable(inputs[0]) {
                // the surviving row set changes as estimates refine, so the
                // output is a refresh stream with no ordering guarantee
                let schema = EdfSchema::new(inputs[0].attributes.clone(), pk, None)?;
                Ok((PlannedOp::FilterShuffle { predicate: predicate.clone() }, schema))
            } else {
                let schema = EdfSchema::new(inputs[0].attributes.clone(), pk, ck)?;
                Ok((PlannedOp::FilterLocal { predicate: predicate.clone() }, schema))
            }
        }
        NodeKind::Join { spec } => {
            let method = if ordered_by(inputs[0], &spec.left_columns())
                && ordered_by(inputs[1], &spec.right_columns())
            {
                JoinMethod::Merge
            } else {
                JoinMethod::Hash
            };
            let schema = join_output_schema(inputs[0], inputs[1], spec, method)?;
            let op = match method {
                JoinMethod::Merge => PlannedOp::MergeJoin { spec: spec.clone() },
                JoinMethod::Hash => PlannedOp::HashJoin { spec: spec.clone() },
            };
            Ok((op, schema))
        }
        NodeKind::Agg { group_by, aggs } => {
            let plan = Arc::new(AggPlan::new(inputs[0], group_by.clone(), aggs.clone())?);
            let clustered = clustered_mode(inputs[0], group_by);
            let schema = plan.output_schema(clustered)?;
            let op = if clustered {
                PlannedOp::ClusteredAgg { plan }
            } else {
                PlannedOp::GrowthAgg { plan }
            };
            Ok((op, schema))
        }
        NodeKind::SortLimit { keys, limit } => {
            for key in keys {
                if inputs[0].attribute(&key.column).is_none() {
                    return Err(Error::Graph(format!(
                        "node {} sorts by unknown attribute {}",
                        node.id, key.column
                    )));
                }
            }
            let (pk, ck) = key_rules(KeyOp::SortLimit, inputs)?;
            let schema = EdfSchema::new(inputs[0].attributes.clone(), pk, ck)?;
            Ok((PlannedOp::SortLimit { keys: keys.clone(), limit: *limit }, schema))
        }
    }
}

/// A fully loaded table: schema plus one row batch per partition, in
/// metadata order.
#[derive(Debug, Clone)]
pub struct BoundTable {
    pub schema: EdfSchema,
    pub partitions: Vec<RowBatch>,
}

impl BoundTable {
    pub fn total_rows(&self) -> u64 {
        self.partitions.iter().map(|p| p.row_count() as u64).sum()
    }
}

/// Execution knobs shared by both runners.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Partition emission order per table; tables not listed stream in
    /// metadata order. Each order must be a permutation of the partitions.
    pub orders: HashMap<String, Vec<usize>>,
    /// Miss probability of every reported confidence interval; `None`
    /// disables intervals.
    pub ci_delta: Option<f64>,
    /// Seed for the bootstrap resampling inside aggregation estimates.
    pub seed: u64,
    pub bootstrap_resamples: usize,
    /// Record one active interval per processed unit into the trace log.
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            orders: HashMap::new(),
            ci_delta: Some(0.05),
            seed: 0,
            bootstrap_resamples: 200,
            trace: false,
        }
    }
}

/// One emitted snapshot of the refining answer.
#[derive(Debug, Clone)]
pub struct SnapshotRecord {
    pub snapshot_index: usize,
    pub t: Progress,
    /// Time since the query started; the only field the two runners are
    /// allowed to disagree on.
    pub wall_clock: Duration,
    pub rows: RowBatch,
    /// Per numeric mutable column, one interval per row.
    pub ci: Option<IndexMap<String, Vec<ConfidenceInterval>>>,
}

/// One active interval of a node: from accepting a unit of input (or
/// starting a partition, for a reader) to handing the results downstream.
#[derive(Debug, Clone)]
pub struct TraceEvent {
    pub node: String,
    pub partition: usize,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub snapshots: Vec<SnapshotRecord>,
    pub trace: Vec<TraceEvent>,
}

/// A node's runtime state machine. The driver feeds it packets from the
/// input slot it asks for; `wants` must name a slot that is still open.
trait OpMachine: Send {
    fn wants(&self) -> usize;
    fn on_message(&mut self, slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>>;
    fn on_input_closed(&mut self, slot: usize) -> Result<Vec<StateUpdate>>;
}

/// Accumulated view of one input stream: deltas append, refreshes replace.
struct StateBuffer {
    schema: EdfSchema,
    parts: Vec<Arc<EstimateBatch>>,
    progress: Progress,
}

impl StateBuffer {
    fn new(schema: EdfSchema) -> Self {
        StateBuffer { schema, parts: Vec::new(), progress: Progress::start(0) }
    }

    fn absorb(&mut self, update: &StateUpdate) {
        match update {
            StateUpdate::Delta(b) => self.parts.push(b.clone()),
            StateUpdate::Refresh(b) => {
                self.parts.clear();
                self.parts.push(b.clone());
            }
        }
        self.progress = update.progress();
    }

    fn full(&self) -> Result<EstimateBatch> {
        if self.parts.is_empty() {
            return Ok(EstimateBatch::exact(
                RowBatch::empty(self.schema.clone()),
                self.progress,
            ));
        }
        let rows = RowBatch::concat(
            self.schema.clone(),
            &self.parts.iter().map(|b| &b.rows).collect::<Vec<_>>(),
        )?;
        let uncertainty =
            Uncertainty::concat(&self.parts.iter().map(|b| &b.uncertainty).collect::<Vec<_>>())?;
        Ok(EstimateBatch { rows, progress: self.progress, uncertainty })
    }
}

/// Replaces the embedded schema of `batch` with the node's declared output
/// schema; used where only key metadata differs (refresh streams drop the
/// clustering key).
fn retag(mut batch: EstimateBatch, schema: &EdfSchema) -> EstimateBatch {
    batch.rows.schema = schema.clone();
    batch
}

struct MapMachine {
    func: MapFunc,
}

impl OpMachine for MapMachine {
    fn wants(&self) -> usize {
        0
    }

    fn on_message(&mut self, _slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        let out = apply_map(message.batch(), &self.func)?;
        Ok(vec![message.rewrap(out)])
    }

    fn on_input_closed(&mut self, _slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(Vec::new())
    }
}

struct FilterLocalMachine {
    predicate: Predicate,
}

impl OpMachine for FilterLocalMachine {
    fn wants(&self) -> usize {
        0
    }

    fn on_message(&mut self, _slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        // empty survivor sets still flow: they carry the progress signal
        let out = apply_filter(message.batch(), &self.predicate)?;
        Ok(vec![message.rewrap(out)])
    }

    fn on_input_closed(&mut self, _slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(Vec::new())
    }
}

struct FilterShuffleMachine {
    predicate: Predicate,
    buf: StateBuffer,
    out_schema: EdfSchema,
}

impl OpMachine for FilterShuffleMachine {
    fn wants(&self) -> usize {
        0
    }

    fn on_message(&mut self, _slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        self.buf.absorb(&message);
        let out = shuffle_without_inference(&self.buf.full()?, &self.predicate)?;
        Ok(vec![StateUpdate::Refresh(Arc::new(retag(out, &self.out_schema)))])
    }

    fn on_input_closed(&mut self, _slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(Vec::new())
    }
}

/// Hash join: slot 0 is the probe side, slot 1 the build side. The build
/// side drains to end-of-stream before any probe batch is read, so every
/// probe row resolves against the complete build state.
struct HashJoinMachine {
    spec: JoinSpec,
    out_schema: EdfSchema,
    build: StateBuffer,
    index: Option<BuiltIndex>,
}

impl OpMachine for HashJoinMachine {
    fn wants(&self) -> usize {
        usize::from(self.index.is_none())
    }

    fn on_message(&mut self, slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        if slot == 1 {
            self.build.absorb(&message);
            return Ok(Vec::new());
        }
        let index = self
            .index
            .as_ref()
            .ok_or_else(|| Error::Exec("hash join probed before its build side closed".into()))?;
        let out = hash_join(message.batch(), index, &self.spec, &self.out_schema)?;
        Ok(vec![message.rewrap(out)])
    }

    fn on_input_closed(&mut self, slot: usize) -> Result<Vec<StateUpdate>> {
        if slot == 1 {
            let full = self.build.full()?;
            debug_assert!(full.progress.is_final(), "build stream must end at t = 1");
            self.index = Some(BuiltIndex::new(full.rows, self.spec.right_columns())?);
        }
        Ok(Vec::new())
    }
}

struct MergeJoinMachine {
    mj: MergeJoin,
}

impl MergeJoinMachine {
    fn deltas(outs: Vec<EstimateBatch>) -> Vec<StateUpdate> {
        outs.into_iter().map(|b| StateUpdate::Delta(Arc::new(b))).collect()
    }
}

impl OpMachine for MergeJoinMachine {
    fn wants(&self) -> usize {
        self.mj.wants()
    }

    fn on_message(&mut self, slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        let batch = match message {
            StateUpdate::Delta(b) => Arc::try_unwrap(b).unwrap_or_else(|b| (*b).clone()),
            StateUpdate::Refresh(_) => {
                return Err(Error::Exec(
                    "merge join requires ordered delta inputs, got a refresh".into(),
                ))
            }
        };
        Ok(Self::deltas(self.mj.push(slot, batch)?))
    }

    fn on_input_closed(&mut self, slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(Self::deltas(self.mj.close(slot)?))
    }
}

/// Aggregation over unordered input: maintains mergeable per-group state,
/// observes the growth of mean group cardinality, and emits a refreshed
/// extrinsic estimate after every tick.
struct GrowthAggMachine {
    plan: Arc<AggPlan>,
    state: AggState,
    model: GrowthModel,
    opts: ExtrinsicOptions,
}

impl OpMachine for GrowthAggMachine {
    fn wants(&self) -> usize {
        0
    }

    fn on_message(&mut self, _slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        let t = message.progress();
        match &message {
            StateUpdate::Delta(b) => {
                let partial = AggState::from_batch(self.plan.clone(), b)?;
                let state = std::mem::replace(&mut self.state, AggState::empty(self.plan.clone()));
                self.state = merge_agg(state, partial)?;
            }
            StateUpdate::Refresh(b) => {
                self.state = AggState::from_batch(self.plan.clone(), b)?;
            }
        }
        if let Some(mean_card) = self.state.mean_cardinality() {
            if t.ratio() > 0.0 {
                self.model.observe(t, mean_card)?;
            }
        }
        let (w, var_w) = self.model.fit_power();
        let out = to_extrinsic(&self.state, t, w, var_w, &self.opts)?;
        Ok(vec![StateUpdate::Refresh(Arc::new(out))])
    }

    fn on_input_closed(&mut self, _slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(Vec::new())
    }
}

struct ClusteredAggMachine {
    agg: ClusteredAgg,
}

impl OpMachine for ClusteredAggMachine {
    fn wants(&self) -> usize {
        0
    }

    fn on_message(&mut self, _slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        let StateUpdate::Delta(batch) = &message else {
            return Err(Error::Exec(
                "ordered aggregation requires delta inputs, got a refresh".into(),
            ));
        };
        Ok(MergeJoinMachine::deltas(self.agg.push(batch)?))
    }

    fn on_input_closed(&mut self, _slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(MergeJoinMachine::deltas(self.agg.close()?))
    }
}

struct SortLimitMachine {
    keys: Vec<SortKey>,
    limit: usize,
    buf: StateBuffer,
    out_schema: EdfSchema,
}

impl OpMachine for SortLimitMachine {
    fn wants(&self) -> usize {
        0
    }

    fn on_message(&mut self, _slot: usize, message: StateUpdate) -> Result<Vec<StateUpdate>> {
        self.buf.absorb(&message);
        let out = sort_limit(&self.buf.full()?, &self.keys, self.limit)?;
        Ok(vec![StateUpdate::Refresh(Arc::new(retag(out, &self.out_schema)))])
    }

    fn on_input_closed(&mut self, _slot: usize) -> Result<Vec<StateUpdate>> {
        Ok(Vec::new())
    }
}

fn build_machine(
    node: &PlannedNode,
    input_schema: impl Fn(usize) -> EdfSchema,
    opts: &RunOptions,
) -> Result<Option<Box<dyn OpMachine>>> {
    let extrinsic = ExtrinsicOptions {
        seed: opts.seed,
        bootstrap_resamples: opts.bootstrap_resamples,
    };
    let machine: Box<dyn OpMachine> = match &node.op {
        PlannedOp::Read { .. } => return Ok(None),
        PlannedOp::Map { func } => Box::new(MapMachine { func: func.clone() }),
        PlannedOp::FilterLocal { predicate } => {
            Box::new(FilterLocalMachine { predicate: predicate.clone() })
        }
        PlannedOp::FilterShuffle { predicate } => Box::new(FilterShuffleMachine {
            predicate: predicate.clone(),
            buf: StateBuffer::new(input_schema(0)),
            out_schema: node.schema.clone(),
        }),
        PlannedOp::HashJoin { spec } => Box::new(HashJoinMachine {
            spec: spec.clone(),
            out_schema: node.schema.clone(),
            build: StateBuffer::new(input_schema(1)),
            index: None,
        }),
        PlannedOp::MergeJoin { spec } => Box::new(MergeJoinMachine {
            mj: MergeJoin::new(&input_schema(0), &input_schema(1), spec.clone())?,
        }),
        PlannedOp::GrowthAgg { plan } => Box::new(GrowthAggMachine {
            plan: plan.clone(),
            state: AggState::empty(plan.clone()),
            model: GrowthModel::new(),
            opts: extrinsic,
        }),
        PlannedOp::ClusteredAgg { plan } => {
            Box::new(ClusteredAggMachine { agg: ClusteredAgg::new(plan.clone())? })
        }
        PlannedOp::SortLimit { keys, limit } => Box::new(SortLimitMachine {
            keys: keys.clone(),
            limit: *limit,
            buf: StateBuffer::new(input_schema(0)),
            out_schema: node.schema.clone(),
        }),
    };
    Ok(Some(machine))
}

/// Drives one machine: tracks open slots and the last partition seen per
/// slot so end-of-stream work is attributed sensibly in the trace.
struct NodeDriver {
    machine: Box<dyn OpMachine>,
    open: Vec<bool>,
    last_partition: Vec<usize>,
}

impl NodeDriver {
    fn new(machine: Box<dyn OpMachine>, arity: usize) -> Self {
        NodeDriver { machine, open: vec![true; arity], last_partition: vec![0; arity] }
    }

    fn done(&self) -> bool {
        self.open.iter().all(|&o| !o)
    }

    fn wants(&self, id: &str) -> Result<usize> {
        let slot = self.machine.wants();
        if !self.open.get(slot).copied().unwrap_or(false) {
            return Err(Error::Exec(format!(
                "node {id} asked to read input {slot} after it closed"
            )));
        }
        Ok(slot)
    }

    /// Feeds one packet; returns the messages to forward downstream.
    fn step(&mut self, slot: usize, packet: Packet) -> Result<(Vec<Message>, usize)> {
        let (outs, partition) = match packet {
            Packet::Data(msg) => {
                self.last_partition[slot] = msg.partition;
                (self.machine.on_message(slot, msg.update)?, msg.partition)
            }
            Packet::Eof => {
                self.open[slot] = false;
                (self.machine.on_input_closed(slot)?, self.last_partition[slot])
            }
        };
        let messages = outs
            .into_iter()
            .map(|update| Message { update, partition })
            .collect();
        Ok((messages, partition))
    }
}

/// Per-reader emission plan resolved against the bound tables.
struct ReaderPlan<'a> {
    table: &'a BoundTable,
    order: Vec<usize>,
}

fn bind_readers<'a>(
    graph: &QueryGraph,
    tables: &'a IndexMap<String, BoundTable>,
    opts: &RunOptions,
) -> Result<Vec<Option<ReaderPlan<'a>>>> {
    graph
        .nodes
        .iter()
        .map(|node| {
            let PlannedOp::Read { table } = &node.op else {
                return Ok(None);
            };
            let bound = tables
                .get(table)
                .ok_or_else(|| Error::Graph(format!("table {table} is not bound")))?;
            if bound.schema != node.schema {
                return Err(Error::Graph(format!(
                    "table {table} does not match the schema the graph was planned against"
                )));
            }
            let n = bound.partitions.len();
            let order = match opts.orders.get(table) {
                Some(order) => {
                    let mut sorted = order.clone();
                    sorted.sort_unstable();
                    if sorted != (0..n).collect::<Vec<_>>() {
                        return Err(Error::Graph(format!(
                            "partition order for {table} must be a permutation of 0..{n}"
                        )));
                    }
                    order.clone()
                }
                None => (0..n).collect(),
            };
            Ok(Some(ReaderPlan { table: bound, order }))
        })
        .collect()
}

/// Shared trace log; cheap no-op when tracing is disabled.
#[derive(Clone)]
struct TraceLog {
    events: Option<Arc<Mutex<Vec<TraceEvent>>>>,
    clock: Instant,
}

impl TraceLog {
    fn new(enabled: bool, clock: Instant) -> Self {
        TraceLog { events: enabled.then(|| Arc::new(Mutex::new(Vec::new()))), clock }
    }

    fn start(&self) -> Duration {
        self.clock.elapsed()
    }

    fn record(&self, node: &str, partition: usize, start: Duration) {
        if let Some(events) = &self.events {
            let end = self.clock.elapsed();
            events
                .lock()
                .expect("trace log poisoned")
                .push(TraceEvent { node: node.into(), partition, start, end });
        }
    }

    fn into_events(self) -> Vec<TraceEvent> {
        match self.events {
            Some(events) => {
                let mut out = Arc::try_unwrap(events)
                    .map(|m| m.into_inner().expect("trace log poisoned"))
                    .unwrap_or_default();
                out.sort_by_key(|e| (e.start, e.node.clone()));
                out
            }
            None => Vec::new(),
        }
    }
}

/// Accumulates the terminal stream and materializes one snapshot per
/// received message. End-of-stream synthesizes a final snapshot when the
/// stream never delivered one, so even an empty query resolves at t = 1.
struct Sink<'a> {
    buf: StateBuffer,
    snapshots: Vec<SnapshotRecord>,
    clock: Instant,
    ci_delta: Option<f64>,
    on_snapshot: Box<dyn FnMut(&SnapshotRecord) + 'a>,
}

impl<'a> Sink<'a> {
    fn new(
        schema: EdfSchema,
        clock: Instant,
        ci_delta: Option<f64>,
        on_snapshot: impl FnMut(&SnapshotRecord) + 'a,
    ) -> Self {
        Sink {
            buf: StateBuffer::new(schema),
            snapshots: Vec::new(),
            clock,
            ci_delta,
            on_snapshot: Box::new(on_snapshot),
        }
    }

    fn on_data(&mut self, message: &Message) -> Result<()> {
        self.buf.absorb(&message.update);
        let full = self.buf.full()?;
        self.push(full)
    }

    fn on_eof(&mut self) -> Result<()> {
        if self.snapshots.last().is_some_and(|s| s.t.is_final()) {
            return Ok(());
        }
        let mut full = self.buf.full()?;
        full.progress = Progress::final_over(self.buf.progress.total);
        self.push(full)
    }

    fn push(&mut self, state: EstimateBatch) -> Result<()> {
        debug_assert!(
            self.snapshots.last().map_or(true, |s| s.t.ratio() <= state.progress.ratio()),
            "snapshot progress must be monotone"
        );
        let ci = match self.ci_delta {
            Some(delta) => Some(intervals(&state, delta)?),
            None => None,
        };
        let record = SnapshotRecord {
            snapshot_index: self.snapshots.len(),
            t: state.progress,
            wall_clock: self.clock.elapsed(),
            rows: state.rows,
            ci,
        };
        (self.on_snapshot)(&record);
        self.snapshots.push(record);
        Ok(())
    }
}

/// Chebyshev intervals for every numeric column with tracked uncertainty.
fn intervals(
    state: &EstimateBatch,
    delta: f64,
) -> Result<IndexMap<String, Vec<ConfidenceInterval>>> {
    let mut out = IndexMap::new();
    for (column, cells) in &state.uncertainty.vars {
        let idx = state
            .rows
            .schema
            .attribute_index(column)
            .ok_or_else(|| Error::State(format!("uncertainty for unknown column {column}")))?;
        if state.rows.schema.attributes[idx].value_kind == ValueKind::Utf8 {
            continue;
        }
        let ci: Vec<ConfidenceInterval> = cells
            .iter()
            .enumerate()
            .map(|(row, cell)| {
                let value = state.rows.value(idx, row).as_f64()?;
                Ok(chebyshev_interval(value, cell.var, delta))
            })
            .collect::<Result<_>>()?;
        out.insert(column.clone(), ci);
    }
    Ok(out)
}

/// Runs the graph with one worker thread per node and bounded channels on
/// every edge. `on_snapshot` fires on the calling thread as each snapshot
/// materializes. A worker that returns an error tears the pipeline down;
/// the first error in topological order is reported.
pub fn run(
    graph: &QueryGraph,
    tables: &IndexMap<String, BoundTable>,
    opts: &RunOptions,
    on_snapshot: impl FnMut(&SnapshotRecord),
) -> Result<RunOutput> {
    let clock = Instant::now();
    let readers = bind_readers(graph, tables, opts)?;
    let trace = TraceLog::new(opts.trace, clock);
    let errors: Mutex<Vec<(usize, Error)>> = Mutex::new(Vec::new());

    // everything fallible happens before the first spawn, so a planning
    // error can never leave half a pipeline blocked on full channels
    let mut drivers: Vec<Option<NodeDriver>> = graph
        .nodes
        .iter()
        .map(|node| {
            let machine =
                build_machine(node, |slot| graph.nodes[node.inputs[slot]].schema.clone(), opts)?;
            Ok(machine.map(|m| NodeDriver::new(m, node.inputs.len())))
        })
        .collect::<Result<_>>()?;

    // one output channel per node; the sink node's channel feeds this thread
    let mut senders: Vec<Option<Sender<Packet>>> = Vec::new();
    let mut receivers: Vec<Option<Receiver<Packet>>> = Vec::new();
    for _ in &graph.nodes {
        let (tx, rx) = bounded(CHANNEL_DEPTH);
        senders.push(Some(tx));
        receivers.push(Some(rx));
    }
    let sink_rx = receivers[graph.sink].take().expect("sink channel");

    let mut sink = Sink::new(graph.sink_schema().clone(), clock, opts.ci_delta, on_snapshot);
    let mut got_eof = false;

    let pumped = std::thread::scope(|scope| {
        for (idx, node) in graph.nodes.iter().enumerate() {
            let tx = senders[idx].take().expect("output channel");
            let trace = trace.clone();
            let errors = &errors;
            match &readers[idx] {
                Some(plan) => {
                    scope.spawn(move || {
                        if let Err(e) = run_reader(node, plan, &tx, &trace) {
                            errors.lock().expect("error log").push((idx, e));
                        }
                    });
                }
                None => {
                    let rxs: Vec<Receiver<Packet>> = node
                        .inputs
                        .iter()
                        .map(|&i| receivers[i].take().expect("input channel"))
                        .collect();
                    let mut driver = drivers[idx].take().expect("non-reader machine");
                    scope.spawn(move || {
                        if let Err(e) = run_worker(node, &mut driver, &rxs, &tx, &trace) {
                            errors.lock().expect("error log").push((idx, e));
                        }
                    });
                }
            }
        }

        let mut pump = || -> Result<()> {
            loop {
                match sink_rx.recv() {
                    Ok(Packet::Data(msg)) => sink.on_data(&msg)?,
                    Ok(Packet::Eof) => {
                        got_eof = true;
                        return Ok(());
                    }
                    Err(_) => return Ok(()), // producers died; errors recorded
                }
            }
        };
        let result = pump();
        // unblocks any producer still waiting on the sink channel before the
        // scope joins the workers
        drop(sink_rx);
        result
    });
    pumped?;

    let mut recorded = errors.into_inner().expect("error log");
    if !recorded.is_empty() {
        // the most upstream failure is the root cause; later ones are fallout
        recorded.sort_by_key(|(idx, _)| *idx);
        return Err(recorded.remove(0).1);
    }
    if !got_eof {
        return Err(Error::Exec("pipeline ended without an end-of-stream signal".into()));
    }
    sink.on_eof()?;
    Ok(RunOutput { snapshots: sink.snapshots, trace: trace.into_events() })
}

fn run_reader(
    node: &PlannedNode,
    plan: &ReaderPlan,
    tx: &Sender<Packet>,
    trace: &TraceLog,
) -> Result<()> {
    let total = plan.table.total_rows();
    let mut done = 0u64;
    for &partition in &plan.order {
        let started = trace.start();
        let rows = plan.table.partitions[partition].clone();
        done += rows.row_count() as u64;
        let batch = EstimateBatch::exact(rows, Progress::new(done, total));
        let message =
            Message { update: StateUpdate::Delta(Arc::new(batch)), partition };
        if tx.send(Packet::Data(message)).is_err() {
            return Ok(()); // consumer gone; its failure is recorded downstream
        }
        trace.record(&node.id, partition, started);
    }
    let _ = tx.send(Packet::Eof);
    Ok(())
}

fn run_worker(
    node: &PlannedNode,
    driver: &mut NodeDriver,
    rxs: &[Receiver<Packet>],
    tx: &Sender<Packet>,
    trace: &TraceLog,
) -> Result<()> {
    while !driver.done() {
        let slot = driver.wants(&node.id)?;
        let packet = match rxs[slot].recv() {
            Ok(packet) => packet,
            Err(_) => return Ok(()), // producer died; its error is recorded
        };
        let started = trace.start();
        let (outs, partition) = driver.step(slot, packet)?;
        for message in outs {
            if tx.send(Packet::Data(message)).is_err() {
                return Ok(());
            }
        }
        trace.record(&node.id, partition, started);
    }
    let _ = tx.send(Packet::Eof);
    Ok(())
}

/// Runs the graph on the calling thread, draining each node completely in
/// topological order. Identical snapshot values to [`run`]; only the
/// wall-clock fields differ.
pub fn run_sequential(
    graph: &QueryGraph,
    tables: &IndexMap<String, BoundTable>,
    opts: &RunOptions,
    on_snapshot: impl FnMut(&SnapshotRecord),
) -> Result<RunOutput> {
    let clock = Instant::now();
    let readers = bind_readers(graph, tables, opts)?;
    let trace = TraceLog::new(opts.trace, clock);

    // consumer[i] = (node, slot) fed by node i; None for the sink
    let mut consumer: Vec<Option<(usize, usize)>> = vec![None; graph.nodes.len()];
    for (idx, node) in graph.nodes.iter().enumerate() {
        for (slot, &input) in node.inputs.iter().enumerate() {
            consumer[input] = Some((idx, slot));
        }
    }

    let mut queues: Vec<Vec<VecDeque<Packet>>> = graph
        .nodes
        .iter()
        .map(|n| n.inputs.iter().map(|_| VecDeque::new()).collect())
        .collect();
    let mut sink_queue: VecDeque<Packet> = VecDeque::new();
    let deliver = |queues: &mut Vec<Vec<VecDeque<Packet>>>,
                       sink_queue: &mut VecDeque<Packet>,
                       from: usize,
                       packet: Packet| {
        match consumer[from] {
            Some((node, slot)) => queues[node][slot].push_back(packet),
            None => sink_queue.push_back(packet),
        }
    };

    for (idx, node) in graph.nodes.iter().enumerate() {
        match &readers[idx] {
            Some(plan) => {
                let total = plan.table.total_rows();
                let mut done = 0u64;
                for &partition in &plan.order {
                    let started = trace.start();
                    let rows = plan.table.partitions[partition].clone();
                    done += rows.row_count() as u64;
                    let batch = EstimateBatch::exact(rows, Progress::new(done, total));
                    let message =
                        Message { update: StateUpdate::Delta(Arc::new(batch)), partition };
                    deliver(&mut queues, &mut sink_queue, idx, Packet::Data(message));
                    trace.record(&node.id, partition, started);
                }
                deliver(&mut queues, &mut sink_queue, idx, Packet::Eof);
            }
            None => {
                let machine =
                    build_machine(node, |slot| graph.nodes[node.inputs[slot]].schema.clone(), opts)?
                        .expect("non-reader machine");
                let mut driver = NodeDriver::new(machine, node.inputs.len());
                while !driver.done() {
                    let slot = driver.wants(&node.id)?;
                    // producers are fully drained, so the wanted slot has data
                    let packet = queues[idx][slot].pop_front().ok_or_else(|| {
                        Error::Exec(format!("node {} starved on input {slot}", node.id))
                    })?;
                    let started = trace.start();
                    let (outs, partition) = driver.step(slot, packet)?;
                    for message in outs {
                        deliver(&mut queues, &mut sink_queue, idx, Packet::Data(message));
                    }
                    trace.record(&node.id, partition, started);
                }
                deliver(&mut queues, &mut sink_queue, idx, Packet::Eof);
            }
        }
    }

    let mut sink = Sink::new(graph.sink_schema().clone(), clock, opts.ci_delta, on_snapshot);
    let mut got_eof = false;
    for packet in sink_queue {
        match packet {
            Packet::Data(msg) => sink.on_data(&msg)?,
            Packet::Eof => {
                got_eof = true;
                break;
            }
        }
    }
    if !got_eof {
        return Err(Error::Exec("pipeline ended without an end-of-stream signal".into()));
    }
    sink.on_eof()?;
    Ok(RunOutput { snapshots: sink.snapshots, trace: trace.into_events() })
}
