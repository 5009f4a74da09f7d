//! Row-wise derivation of new columns from numeric expressions, with
//! first-order uncertainty propagation when the referenced inputs carry
//! variance.

use indexmap::IndexMap;

use crate::confidence::{propagate_map, UncertaintyCell};
use crate::edf::{AttributeDef, Column, EdfSchema, Mutability, RowBatch, ValueKind};
use crate::ops::{EstimateBatch, Uncertainty, VarCell};
use crate::{Error, Result};

/// One argument of a derive step: a column reference or a numeric
/// literal. Tokens that parse as numbers are literals.
#[derive(Debug, Clone, PartialEq)]
pub enum MapArg {
    Column(String),
    Literal(f64),
}

impl MapArg {
    pub fn parse(token: &str) -> MapArg {
        match token.parse::<f64>() {
            Ok(v) => MapArg::Literal(v),
            Err(_) => MapArg::Column(token.to_string()),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            MapArg::Column(c) => c.clone(),
            MapArg::Literal(v) => format!("{v}"),
        }
    }
}

/// `output:func:arg:arg` with binary builtins add, sub, mul, div. Steps
/// run in order, so later steps may reference earlier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeriveStep {
    pub output: String,
    pub func: String,
    pub args: Vec<MapArg>,
}

impl DeriveStep {
    pub fn parse(text: &str) -> Result<DeriveStep> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() < 3 {
            return Err(Error::QuerySpec(format!(
                "derive {text:?} is not `output:func:arg[:arg]`"
            )));
        }
        Ok(DeriveStep {
            output: parts[0].to_string(),
            func: parts[1].to_string(),
            args: parts[2..].iter().map(|t| MapArg::parse(t)).collect(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}:{}", self.output, self.func);
        for a in &self.args {
            s.push(':');
            s.push_str(&a.to_text());
        }
        s
    }
}

/// A map operator: derive steps followed by an optional projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapFunc {
    pub derives: Vec<DeriveStep>,
    pub project: Option<Vec<String>>,
}

fn apply_builtin(func: &str, a: f64, b: f64) -> Result<f64> {
    Ok(match func {
        "add" => a + b,
        "sub" => a - b,
        "mul" => a * b,
        "div" => a / b,
        other => return Err(Error::QuerySpec(format!("unknown map function {other:?}"))),
    })
}

fn is_numeric(kind: ValueKind) -> bool {
    matches!(kind, ValueKind::Int64 | ValueKind::Float64)
}

/// Attribute set visible at step `i`: input attributes plus outputs of
/// earlier steps.
fn arg_mutability(
    func: &MapFunc,
    input: &EdfSchema,
    step: usize,
) -> Result<Vec<(String, Mutability)>> {
    let mut seen: IndexMap<String, Mutability> = input
        .attributes
        .iter()
        .map(|a| (a.name.clone(), a.mutability))
        .collect();
    for s in &func.derives[..step] {
        let m = derive_step_mutability(s, &seen)?;
        seen.insert(s.output.clone(), m);
    }
    Ok(seen.into_iter().collect())
}

fn derive_step_mutability(
    step: &DeriveStep,
    visible: &IndexMap<String, Mutability>,
) -> Result<Mutability> {
    let mut m = Mutability::Constant;
    for arg in &step.args {
        if let MapArg::Column(c) = arg {
            match visible.get(c) {
                Some(Mutability::Mutable) => m = Mutability::Mutable,
                Some(Mutability::Constant) => {}
                None => {
                    return Err(Error::Schema(format!(
                        "derive step references unknown column {c}"
                    )))
                }
            }
        }
    }
    Ok(m)
}

/// Derives the output schema: each step appends a float64 column that is
/// mutable exactly when some argument is mutable; the projection then
/// selects columns. Projections must keep the whole primary key; the
/// clustering key survives only if all its columns do.
pub fn map_output_schema(input: &EdfSchema, func: &MapFunc) -> Result<EdfSchema> {
    let mut attrs = input.attributes.clone();
    for (i, step) in func.derives.iter().enumerate() {
        if step.args.len() != 2 {
            return Err(Error::Schema(format!(
                "map function {} takes 2 arguments, step {} has {}",
                step.func,
                step.output,
                step.args.len()
            )));
        }
        apply_builtin(&step.func, 0.0, 1.0)?;
        if attrs.iter().any(|a| a.name == step.output) {
            return Err(Error::Schema(format!(
                "derived column {} collides with an existing column",
                step.output
            )));
        }
        let visible: IndexMap<String, Mutability> =
            arg_mutability(func, input, i)?.into_iter().collect();
        for arg in &step.args {
            if let MapArg::Column(c) = arg {
                let kind = attrs
                    .iter()
                    .find(|a| a.name == *c)
                    .map(|a| a.value_kind)
                    .ok_or_else(|| {
                        Error::Schema(format!("derive step references unknown column {c}"))
                    })?;
                if !is_numeric(kind) {
                    return Err(Error::Schema(format!(
                        "derive argument {c} has kind {}, expected a numeric column",
                        kind.name()
                    )));
                }
            }
        }
        attrs.push(AttributeDef::new(
            step.output.clone(),
            ValueKind::Float64,
            derive_step_mutability(step, &visible)?,
        ));
    }

    let attrs = match &func.project {
        None => attrs,
        Some(keep) => {
            let mut out = Vec::with_capacity(keep.len());
            for name in keep {
                let attr = attrs.iter().find(|a| a.name == *name).ok_or_else(|| {
                    Error::Schema(format!("projection keeps unknown column {name}"))
                })?;
                out.push(attr.clone());
            }
            for pk in &input.primary_key {
                if !keep.contains(pk) {
                    return Err(Error::Schema(format!(
                        "projection drops primary key column {pk}"
                    )));
                }
            }
            out
        }
    };
    let ck = input.clustering_key.as_ref().and_then(|ck| {
        let survived = ck.iter().all(|c| attrs.iter().any(|a| a.name == *c));
        survived.then(|| ck.clone())
    });
    EdfSchema::new(attrs, input.primary_key.clone(), ck)
}

enum ResolvedArg {
    Col(usize),
    Derived(usize),
    Lit(f64),
}

struct ResolvedStep {
    func: String,
    args: [ResolvedArg; 2],
}

fn resolve_steps(func: &MapFunc, input: &EdfSchema) -> Result<Vec<ResolvedStep>> {
    let mut derived: IndexMap<&str, usize> = IndexMap::new();
    let mut out = Vec::with_capacity(func.derives.len());
    for (i, step) in func.derives.iter().enumerate() {
        let mut resolved = Vec::with_capacity(2);
        for arg in &step.args {
            resolved.push(match arg {
                MapArg::Literal(v) => ResolvedArg::Lit(*v),
                MapArg::Column(c) => match derived.get(c.as_str()) {
                    Some(&idx) => ResolvedArg::Derived(idx),
                    None => ResolvedArg::Col(input.attribute_index(c).ok_or_else(|| {
                        Error::Schema(format!("derive step references unknown column {c}"))
                    })?),
                },
            });
        }
        let [a, b] = <[ResolvedArg; 2]>::try_from(resolved)
            .map_err(|_| Error::Schema("map steps take exactly two arguments".into()))?;
        derived.insert(step.output.as_str(), i);
        out.push(ResolvedStep { func: step.func.clone(), args: [a, b] });
    }
    Ok(out)
}

/// Evaluates all derive steps for one row, reading mutable inputs from
/// `point` (index into `point_cols`) instead of the stored cells.
fn eval_row(
    steps: &[ResolvedStep],
    batch: &RowBatch,
    row: usize,
    point_cols: &[usize],
    point: &[f64],
) -> Result<Vec<f64>> {
    let mut derived = Vec::with_capacity(steps.len());
    for step in steps {
        let mut vals = [0.0; 2];
        for (slot, arg) in step.args.iter().enumerate() {
            vals[slot] = match arg {
                ResolvedArg::Lit(v) => *v,
                ResolvedArg::Derived(i) => derived[*i],
                ResolvedArg::Col(c) => match point_cols.iter().position(|pc| pc == c) {
                    Some(p) => point[p],
                    None => batch.columns[*c].f64_at(row)?,
                },
            };
        }
        derived.push(apply_builtin(&step.func, vals[0], vals[1])?);
    }
    Ok(derived)
}

/// Applies derive steps and projection to a batch, propagating row-level
/// uncertainty from mutable numeric inputs into the derived columns (and
/// their covariances) by finite differences.
pub fn apply_map(input: &EstimateBatch, func: &MapFunc) -> Result<EstimateBatch> {
    let in_schema = &input.rows.schema;
    let out_schema = map_output_schema(in_schema, func)?;
    let steps = resolve_steps(func, in_schema)?;
    let rows = input.row_count();

    // coordinates of the uncertainty point: mutable numeric input attrs
    let point_attrs: Vec<(String, usize)> = in_schema
        .attributes
        .iter()
        .enumerate()
        .filter(|(_, a)| a.mutability == Mutability::Mutable && is_numeric(a.value_kind))
        .map(|(i, a)| (a.name.clone(), i))
        .collect();
    let point_cols: Vec<usize> = point_attrs.iter().map(|(_, i)| *i).collect();

    // mutable outputs: surviving point attrs (identity) then mutable derives
    let surviving: Vec<&(String, usize)> = point_attrs
        .iter()
        .filter(|(name, _)| out_schema.attribute(name).is_some())
        .collect();
    let mutable_derives: Vec<usize> = func
        .derives
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            out_schema
                .attribute(&s.output)
                .map(|a| a.mutability == Mutability::Mutable)
                .is_some_and(|m| m)
        })
        .map(|(i, _)| i)
        .collect();
    let out_names: Vec<&str> = surviving
        .iter()
        .map(|(n, _)| n.as_str())
        .chain(mutable_derives.iter().map(|&i| func.derives[i].output.as_str()))
        .collect();

    let mut derived_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); func.derives.len()];
    let mut out_vars: IndexMap<String, Vec<VarCell>> = out_names
        .iter()
        .map(|n| (n.to_string(), Vec::with_capacity(rows)))
        .collect();
    let mut out_cross: IndexMap<(String, String), Vec<f64>> = IndexMap::new();

    for row in 0..rows {
        let point: Vec<f64> = point_cols
            .iter()
            .map(|&c| input.rows.columns[c].f64_at(row))
            .collect::<Result<_>>()?;
        let values = eval_row(&steps, &input.rows, row, &point_cols, &point)?;
        for (i, v) in values.iter().enumerate() {
            derived_cols[i].push(*v);
        }

        let any_var = point_attrs.iter().any(|(n, _)| input.uncertainty.row_var(n, row) != 0.0)
            || input
                .uncertainty
                .cross
                .iter()
                .any(|(_, vals)| vals.get(row).copied().unwrap_or(0.0) != 0.0);
        let cell = if !any_var {
            UncertaintyCell::of_variances(vec![0.0; out_names.len()])
        } else {
            let mut cell_in = UncertaintyCell::of_variances(
                point_attrs
                    .iter()
                    .map(|(n, _)| input.uncertainty.row_var(n, row))
                    .collect(),
            );
            for i in 0..point_attrs.len() {
                cell_in.unstable[i] = input.uncertainty.row_unstable(&point_attrs[i].0, row);
                for j in i + 1..point_attrs.len() {
                    let c = input.uncertainty.row_cross(&point_attrs[i].0, &point_attrs[j].0, row);
                    if c != 0.0 {
                        cell_in.cross.push((i, j, c));
                    }
                }
            }
            let f = |p: &[f64]| -> Vec<f64> {
                let derived = eval_row(&steps, &input.rows, row, &point_cols, p)
                    .unwrap_or_else(|_| vec![f64::NAN; steps.len()]);
                surviving
                    .iter()
                    .map(|(_, c)| {
                        let pos = point_cols.iter().position(|pc| pc == c).unwrap();
                        p[pos]
                    })
                    .chain(mutable_derives.iter().map(|&i| derived[i]))
                    .collect()
            };
            propagate_map(&f, &point, &cell_in)?
        };

        for (k, name) in out_names.iter().enumerate() {
            let var = cell.variance[k];
            out_vars[*name].push(VarCell {
                var: if var.is_nan() { f64::INFINITY } else { var },
                unstable: cell.unstable[k],
            });
            for j in k + 1..out_names.len() {
                let c = cell.covariance(k, j);
                if c != 0.0 || out_cross.contains_key(&super::cross_key(name, out_names[j])) {
                    out_cross
                        .entry(super::cross_key(name, out_names[j]))
                        .or_insert_with(|| vec![0.0; row])
                        .push(if c.is_nan() { 0.0 } else { c });
                }
            }
        }
        // keep cross vectors aligned even when this row contributed none
        for vals in out_cross.values_mut() {
            if vals.len() < row + 1 {
                vals.push(0.0);
            }
        }
    }

    // mutable non-numeric columns ride along outside the numeric point
    for attr in out_schema.mutable_attributes() {
        if !out_vars.contains_key(&attr.name) {
            let entry = input
                .uncertainty
                .var_of(&attr.name)
                .map(|v| v.to_vec())
                .unwrap_or_else(|| vec![VarCell::exact(); rows]);
            out_vars.insert(attr.name.clone(), entry);
        }
    }

    let mut columns = Vec::with_capacity(out_schema.attributes.len());
    for attr in &out_schema.attributes {
        if let Some(idx) = in_schema.attribute_index(&attr.name) {
            columns.push(input.rows.columns[idx].clone());
        } else {
            let step = func
                .derives
                .iter()
                .position(|s| s.output == attr.name)
                .expect("derived column accounted for in schema");
            columns.push(Column::Float64(std::mem::take(&mut derived_cols[step])));
        }
    }
    let rows_out = RowBatch::new(out_schema, columns)?;
    EstimateBatch::new(rows_out, input.progress, Uncertainty { vars: out_vars, cross: out_cross })
}
