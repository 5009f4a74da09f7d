//! Line-based query files. A file declares its tables, then one node per
//! line, then the sink:
//!
//! ```text
//! table sales dir=data/sales
//! table cats dir=data/cats
//!
//! node scan read table=sales
//! node dims read table=cats
//! node joined join left=scan right=dims on=cat type=inner
//! node wx map derive=wx:mul:amount:weight input=joined
//! node keep filter input=wx where="wx > 0.5"
//! node by_cat agg input=keep by=cat aggs=count:n,avg:wx:mean_wx
//! node top sort input=by_cat by=mean_wx:desc limit=5
//! sink top
//! ```
//!
//! Values containing spaces are double-quoted. Nodes may only reference
//! inputs declared on earlier lines; that order lets the parser resolve
//! each node's input schema (by planning the already-declared prefix of
//! the graph) and type filter literals against it.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::edf::EdfSchema;
use crate::exec::{build_graph, GraphSpec, NodeKind, NodeSpec};
use crate::inference::AggregateKind;
use crate::ingest::{load_meta, TableMeta};
use crate::ops::{
    AggSpec, DeriveStep, JoinSpec, JoinType, MapFunc, Predicate, SortDirection, SortKey,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableDecl {
    pub name: String,
    /// Table directory, relative to the query file unless absolute.
    pub dir: PathBuf,
}

/// A parsed query file, not yet typed against table schemas.
#[derive(Debug, Clone)]
pub struct QueryFile {
    pub tables: Vec<TableDecl>,
    nodes: Vec<RawNode>,
    pub sink: String,
}

#[derive(Debug, Clone)]
struct RawNode {
    id: String,
    kind: String,
    keyvals: Vec<(String, String)>,
    line: usize,
}

/// Splits on whitespace outside double quotes; quotes delimit but are not
/// part of the token.
fn tokenize(line: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut saw_quote = false;
    for ch in line.chars() {
        match ch {
            '"' => {
                in_quotes = !in_quotes;
                saw_quote = true;
            }
            c if c.is_whitespace() && !in_quotes => {
                if !cur.is_empty() || saw_quote {
                    tokens.push(std::mem::take(&mut cur));
                    saw_quote = false;
                }
            }
            c => cur.push(c),
        }
    }
    if in_quotes {
        return Err(Error::QuerySpec(format!("unclosed quote in `{line}`")));
    }
    if !cur.is_empty() || saw_quote {
        tokens.push(cur);
    }
    Ok(tokens)
}

fn keyvals(tokens: &[String], line: usize) -> Result<Vec<(String, String)>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::QuerySpec(format!("line {line}: expected key=value, got `{t}`"))
                })
        })
        .collect()
}

pub fn parse_query(text: &str) -> Result<QueryFile> {
    let mut tables = Vec::new();
    let mut nodes: Vec<RawNode> = Vec::new();
    let mut sink: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens = tokenize(trimmed)?;
        match tokens[0].as_str() {
            "table" => {
                let [_, name, rest @ ..] = tokens.as_slice() else {
                    return Err(Error::QuerySpec(format!(
                        "line {line}: expected `table <name> dir=<path>`"
                    )));
                };
                if tables.iter().any(|t: &TableDecl| t.name == *name) {
                    return Err(Error::QuerySpec(format!(
                        "line {line}: table {name} declared twice"
                    )));
                }
                let mut dir = None;
                for (k, v) in keyvals(rest, line)? {
                    match k.as_str() {
                        "dir" => dir = Some(PathBuf::from(v)),
                        other => {
                            return Err(Error::QuerySpec(format!(
                                "line {line}: unknown key `{other}` on table {name}"
                            )))
                        }
                    }
                }
                let dir = dir.ok_or_else(|| {
                    Error::QuerySpec(format!("line {line}: table {name} needs dir="))
                })?;
                tables.push(TableDecl { name: name.clone(), dir });
            }
            "node" => {
                let [_, id, kind, rest @ ..] = tokens.as_slice() else {
                    return Err(Error::QuerySpec(format!(
                        "line {line}: expected `node <id> <kind> key=value...`"
                    )));
                };
                if nodes.iter().any(|n| n.id == *id) {
                    return Err(Error::QuerySpec(format!(
                        "line {line}: node {id} declared twice"
                    )));
                }
                nodes.push(RawNode {
                    id: id.clone(),
                    kind: kind.clone(),
                    keyvals: keyvals(rest, line)?,
                    line,
                });
            }
            "sink" => {
                let [_, id] = tokens.as_slice() else {
                    return Err(Error::QuerySpec(format!("line {line}: expected `sink <id>`")));
                };
                if sink.replace(id.clone()).is_some() {
                    return Err(Error::QuerySpec(format!("line {line}: sink declared twice")));
                }
            }
            other => {
                return Err(Error::QuerySpec(format!(
                    "line {line}: unknown directive `{other}`"
                )))
            }
        }
    }

    let sink = sink.ok_or_else(|| Error::QuerySpec("query file has no sink line".into()))?;
    if nodes.is_empty() {
        return Err(Error::QuerySpec("query file declares no nodes".into()));
    }
    Ok(QueryFile { tables, nodes, sink })
}

/// Pulls one key's value out of a node's pairs, consuming it.
fn take_one(pairs: &mut Vec<(String, String)>, key: &str) -> Option<String> {
    let pos = pairs.iter().position(|(k, _)| k == key)?;
    Some(pairs.remove(pos).1)
}

fn take_required(node: &RawNode, pairs: &mut Vec<(String, String)>, key: &str) -> Result<String> {
    take_one(pairs, key).ok_or_else(|| {
        Error::QuerySpec(format!(
            "line {}: {} node {} needs {key}=",
            node.line, node.kind, node.id
        ))
    })
}

/// Resolves input-reference keys, requiring the referenced nodes to be
/// declared on earlier lines.
fn resolve_inputs(
    node: &RawNode,
    pairs: &mut Vec<(String, String)>,
    keys: &[&str],
    resolved: &[NodeSpec],
) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(keys.len());
    for key in keys {
        let id = take_required(node, pairs, key)?;
        if !resolved.iter().any(|n| n.id == id) {
            return Err(Error::QuerySpec(format!(
                "line {}: node {} references {id} before it is declared",
                node.line, node.id
            )));
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Pulls every occurrence of a repeatable key, in declaration order.
fn take_all(pairs: &mut Vec<(String, String)>, key: &str) -> Vec<String> {
    let mut out = Vec::new();
    pairs.retain(|(k, v)| {
        if k == key {
            out.push(v.clone());
            false
        } else {
            true
        }
    });
    out
}

fn split_commas(value: &str) -> Vec<String> {
    if value.is_empty() {
        Vec::new()
    } else {
        value.split(',').map(|s| s.trim().to_string()).collect()
    }
}

fn parse_agg_token(token: &str, line: usize) -> Result<AggSpec> {
    let parts: Vec<&str> = token.split(':').collect();
    let (kind, input, output) = match parts.as_slice() {
        [kind, output] => (*kind, None, *output),
        [kind, input, output] => (*kind, Some(input.to_string()), *output),
        _ => {
            return Err(Error::QuerySpec(format!(
                "line {line}: aggregate `{token}` is not `kind[:input]:output`"
            )))
        }
    };
    Ok(AggSpec {
        kind: AggregateKind::parse(kind)
            .map_err(|e| Error::QuerySpec(format!("line {line}: {e}")))?,
        input,
        output: output.to_string(),
    })
}

fn parse_sort_token(token: &str, line: usize) -> Result<SortKey> {
    let (column, direction) = match token.split_once(':') {
        None => (token.to_string(), SortDirection::Asc),
        Some((col, dir)) => (
            col.to_string(),
            SortDirection::parse(dir)
                .map_err(|_| Error::QuerySpec(format!("line {line}: bad sort direction `{dir}`")))?,
        ),
    };
    Ok(SortKey { column, direction })
}

fn parse_join_keys(on: &str, line: usize) -> Result<Vec<(String, String)>> {
    split_commas(on)
        .into_iter()
        .map(|pair| match pair.split_once(':') {
            Some((l, r)) => Ok((l.to_string(), r.to_string())),
            None if !pair.is_empty() => Ok((pair.clone(), pair)),
            None => Err(Error::QuerySpec(format!("line {line}: empty join key in on="))),
        })
        .collect()
}

/// The sub-spec feeding `target`: exactly its ancestors, in declared
/// order, with `target` as the sink.
fn prefix_spec(resolved: &[NodeSpec], target: &str) -> GraphSpec {
    let mut wanted = vec![target.to_string()];
    let mut i = 0;
    while i < wanted.len() {
        if let Some(node) = resolved.iter().find(|n| n.id == wanted[i]) {
            for input in &node.inputs {
                if !wanted.contains(input) {
                    wanted.push(input.clone());
                }
            }
        }
        i += 1;
    }
    let nodes = resolved.iter().filter(|n| wanted.contains(&n.id)).cloned().collect();
    GraphSpec { nodes, sink: target.to_string() }
}

impl QueryFile {
    /// Types the file against table schemas, producing a buildable graph
    /// description. Each node's input schema comes from planning the
    /// prefix of the graph declared before it, so typing here can never
    /// disagree with the planner.
    pub fn into_graph(&self, schemas: &IndexMap<String, EdfSchema>) -> Result<GraphSpec> {
        let mut resolved: Vec<NodeSpec> = Vec::with_capacity(self.nodes.len());

        for node in &self.nodes {
            let mut pairs = node.keyvals.clone();

            let (kind, inputs) = match node.kind.as_str() {
                "read" => {
                    let table = take_required(node, &mut pairs, "table")?;
                    (NodeKind::Read { table }, Vec::new())
                }
                "map" => {
                    let inputs = resolve_inputs(node, &mut pairs, &["input"], &resolved)?;
                    let derives = take_all(&mut pairs, "derive")
                        .iter()
                        .map(|t| DeriveStep::parse(t))
                        .collect::<Result<Vec<_>>>()?;
                    let project = take_one(&mut pairs, "project").map(|p| split_commas(&p));
                    if derives.is_empty() && project.is_none() {
                        return Err(Error::QuerySpec(format!(
                            "line {}: map node {} needs derive= or project=",
                            node.line, node.id
                        )));
                    }
                    (NodeKind::Map { func: MapFunc { derives, project } }, inputs)
                }
                "filter" => {
                    let inputs = resolve_inputs(node, &mut pairs, &["input"], &resolved)?;
                    let text = take_required(node, &mut pairs, "where")?;
                    let schema = schema_of(&resolved, &inputs[0], schemas)?;
                    let predicate = Predicate::parse(&text, &schema)
                        .map_err(|e| Error::QuerySpec(format!("line {}: {e}", node.line)))?;
                    (NodeKind::Filter { predicate }, inputs)
                }
                "join" => {
                    let inputs = resolve_inputs(node, &mut pairs, &["left", "right"], &resolved)?;
                    let keys = parse_join_keys(&take_required(node, &mut pairs, "on")?, node.line)?;
                    let join_type = match take_one(&mut pairs, "type").as_deref() {
                        None | Some("inner") => JoinType::Inner,
                        Some("left") => JoinType::Left,
                        Some(other) => {
                            return Err(Error::QuerySpec(format!(
                                "line {}: unknown join type `{other}`",
                                node.line
                            )))
                        }
                    };
                    (NodeKind::Join { spec: JoinSpec { keys, join_type } }, inputs)
                }
                "agg" => {
                    let inputs = resolve_inputs(node, &mut pairs, &["input"], &resolved)?;
                    let group_by =
                        take_one(&mut pairs, "by").map(|b| split_commas(&b)).unwrap_or_default();
                    let aggs = split_commas(&take_required(node, &mut pairs, "aggs")?)
                        .iter()
                        .map(|t| parse_agg_token(t, node.line))
                        .collect::<Result<Vec<_>>>()?;
                    (NodeKind::Agg { group_by, aggs }, inputs)
                }
                "sort" => {
                    let inputs = resolve_inputs(node, &mut pairs, &["input"], &resolved)?;
                    let keys = split_commas(&take_required(node, &mut pairs, "by")?)
                        .iter()
                        .map(|t| parse_sort_token(t, node.line))
                        .collect::<Result<Vec<_>>>()?;
                    let limit = take_required(node, &mut pairs, "limit")?
                        .parse::<usize>()
                        .map_err(|_| {
                            Error::QuerySpec(format!("line {}: limit must be a count", node.line))
                        })?;
                    (NodeKind::SortLimit { keys, limit }, inputs)
                }
                other => {
                    return Err(Error::QuerySpec(format!(
                        "line {}: unknown node kind `{other}`",
                        node.line
                    )))
                }
            };

            if let Some((key, _)) = pairs.first() {
                return Err(Error::QuerySpec(format!(
                    "line {}: unknown key `{key}` on {} node {}",
                    node.line, node.kind, node.id
                )));
            }
            resolved.push(NodeSpec { id: node.id.clone(), kind, inputs });
        }

        Ok(GraphSpec { nodes: resolved, sink: self.sink.clone() })
    }
}

fn schema_of(
    resolved: &[NodeSpec],
    target: &str,
    schemas: &IndexMap<String, EdfSchema>,
) -> Result<EdfSchema> {
    let spec = prefix_spec(resolved, target);
    Ok(build_graph(&spec, schemas)?.sink_schema().clone())
}

/// A query file with its tables loaded: ready to plan and bind.
#[derive(Debug, Clone)]
pub struct LoadedQuery {
    pub graph: GraphSpec,
    pub tables: IndexMap<String, TableMeta>,
}

/// Reads a query file and the metadata of every table it declares.
/// Relative table directories resolve against the query file's directory.
pub fn load_query(path: impl AsRef<Path>) -> Result<LoadedQuery> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::QuerySpec(format!("cannot read {}: {e}", path.display())))?;
    let file = parse_query(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut tables = IndexMap::new();
    for decl in &file.tables {
        let dir =
            if decl.dir.is_absolute() { decl.dir.clone() } else { base.join(&decl.dir) };
        tables.insert(decl.name.clone(), load_meta(&dir)?);
    }
    let schemas: IndexMap<String, EdfSchema> =
        tables.iter().map(|(n, m)| (n.clone(), m.schema.clone())).collect();
    let graph = file.into_graph(&schemas)?;
    Ok(LoadedQuery { graph, tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::{AttributeDef, ValueKind};
    use crate::ops::CmpOp;

    fn sales_schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("id", ValueKind::Int64),
                AttributeDef::constant("cat", ValueKind::Int64),
                AttributeDef::constant("amount", ValueKind::Float64),
            ],
            vec!["id".into()],
            None,
        )
        .unwrap()
    }

    fn cats_schema() -> EdfSchema {
        EdfSchema::new(
            vec![
                AttributeDef::constant("cat", ValueKind::Int64),
                AttributeDef::constant("weight", ValueKind::Float64),
            ],
            vec!["cat".into()],
            None,
        )
        .unwrap()
    }

    fn schemas() -> IndexMap<String, EdfSchema> {
        IndexMap::from([
            ("sales".to_string(), sales_schema()),
            ("cats".to_string(), cats_schema()),
        ])
    }

    const FULL: &str = r#"
# weighted amounts per category
table sales dir=data/sales
table cats dir=other/cats

node scan read table=sales
node dims read table=cats
node joined join left=scan right=dims on=cat type=inner
node wx map input=joined derive=wx:mul:amount:weight
node keep filter input=wx where="wx > 0.5 and cat != 3"
node by_cat agg input=keep by=cat aggs=count:n,avg:wx:mean_wx
node top sort input=by_cat by=mean_wx:desc,n limit=5
sink top
"#;

    #[test]
    fn full_featured_file_parses_and_types() {
        let file = parse_query(FULL).unwrap();
        assert_eq!(file.tables.len(), 2);
        assert_eq!(file.tables[1].dir, PathBuf::from("other/cats"));
        assert_eq!(file.sink, "top");

        let graph = file.into_graph(&schemas()).unwrap();
        assert_eq!(graph.nodes.len(), 7);

        let keep = graph.nodes.iter().find(|n| n.id == "keep").unwrap();
        let NodeKind::Filter { predicate } = &keep.kind else { panic!() };
        assert_eq!(predicate.clauses.len(), 2);
        assert_eq!(predicate.clauses[0].op, CmpOp::Gt);
        assert_eq!(
            predicate.clauses[1].literal,
            crate::edf::Value::Int64(3),
            "literal typed by the joined schema, not guessed from its spelling"
        );

        let top = graph.nodes.iter().find(|n| n.id == "top").unwrap();
        let NodeKind::SortLimit { keys, limit } = &top.kind else { panic!() };
        assert_eq!(*limit, 5);
        assert_eq!(keys[0].direction, SortDirection::Desc);
        assert_eq!(keys[1].direction, SortDirection::Asc, "direction defaults to asc");

        // the typed spec is accepted by the planner end to end
        build_graph(&graph, &schemas()).unwrap();
    }

    #[test]
    fn aggregate_tokens_cover_every_kind() {
        let aggs = "aggs=count:n,sum:x:s,avg:x:a,var:x:v,stddev:x:sd,min:x:lo,max:x:hi,count_distinct:x:d,quantile(0.5):x:med";

        // inputs must be declared on earlier lines
        let backwards = format!("node a agg input=s by=g {aggs}\nnode s read table=t\nsink a");
        let err = parse_query(&backwards).unwrap().into_graph(&IndexMap::new()).unwrap_err();
        assert!(err.to_string().contains("before it is declared"), "{err}");

        let ok = format!("node s read table=t\nnode a agg input=s by=g {aggs}\nsink a");
        let file = parse_query(&ok).unwrap();
        let mut schemas = IndexMap::new();
        schemas.insert(
            "t".to_string(),
            EdfSchema::new(
                vec![
                    AttributeDef::constant("g", ValueKind::Int64),
                    AttributeDef::constant("x", ValueKind::Float64),
                ],
                vec!["g".into(), "x".into()],
                None,
            )
            .unwrap(),
        );
        let graph = file.into_graph(&schemas).unwrap();
        let NodeKind::Agg { aggs, .. } = &graph.nodes[1].kind else { panic!() };
        assert_eq!(aggs.len(), 9);
        assert_eq!(aggs[0].input, None);
        assert_eq!(aggs[8].kind, crate::inference::order_stat(0.5));
    }

    #[test]
    fn unknown_keys_and_kinds_are_rejected() {
        let cases = [
            ("node s read table=sales flavor=hot\nsink s", "unknown key `flavor`"),
            ("node s scan table=sales\nsink s", "unknown node kind `scan`"),
            ("node s read table=sales\n", "no sink"),
            ("table sales\nnode s read table=sales\nsink s", "needs dir="),
            ("node s read\nsink s", "needs table="),
            ("node s read table=sales\nnode s read table=sales\nsink s", "declared twice"),
            ("node f filter input=s where=\"x > 1\nsink f", "unclosed quote"),
        ];
        for (text, needle) in cases {
            let err = match parse_query(text) {
                Err(e) => e.to_string(),
                Ok(file) => file.into_graph(&schemas()).unwrap_err().to_string(),
            };
            assert!(err.contains(needle), "expected {needle:?} in {err:?}");
        }
    }

    #[test]
    fn join_keys_accept_shorthand_and_pairs() {
        let text = "node l read table=sales\nnode r read table=cats\nnode j join left=l right=r on=cat:cat\nsink j";
        let graph = parse_query(text).unwrap().into_graph(&schemas()).unwrap();
        let NodeKind::Join { spec } = &graph.nodes[2].kind else { panic!() };
        assert_eq!(spec.keys, vec![("cat".to_string(), "cat".to_string())]);
        assert_eq!(spec.join_type, JoinType::Inner);

        let text = text.replace("on=cat:cat", "on=cat type=left");
        let graph = parse_query(&text).unwrap().into_graph(&schemas()).unwrap();
        let NodeKind::Join { spec } = &graph.nodes[2].kind else { panic!() };
        assert_eq!(spec.keys, vec![("cat".to_string(), "cat".to_string())]);
        assert_eq!(spec.join_type, JoinType::Left);
    }

    #[test]
    fn filter_typing_sees_derived_columns() {
        // wx only exists downstream of the map node; typing must follow
        // the declared graph, not the base table
        let text = "node s read table=sales\nnode m map input=s derive=wx:mul:amount:2.0\nnode f filter input=m where=\"wx >= 4\"\nsink f";
        let graph = parse_query(text).unwrap().into_graph(&schemas()).unwrap();
        let NodeKind::Filter { predicate } = &graph.nodes[2].kind else { panic!() };
        assert_eq!(predicate.clauses[0].literal, crate::edf::Value::Float64(4.0));
    }
}
