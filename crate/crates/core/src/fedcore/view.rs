//! Materialized views over member tables.
//!
//! Each member reduces its own filtered column to a small partial (for `mean`
//! a sum and a count); only partials cross the fedlet boundary. The community
//! combines the partials of its currently authorized members.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::table::{Cell, Column, ColumnType, DataTable};
use super::FedcoreError;
use crate::identity::FedId;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ViewTransform {
    Sum,
    Mean,
    Count,
    Min,
    Max,
    Custom(String),
}

impl fmt::Display for ViewTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewTransform::Sum => "sum",
            ViewTransform::Mean => "mean",
            ViewTransform::Count => "count",
            ViewTransform::Min => "min",
            ViewTransform::Max => "max",
            ViewTransform::Custom(name) => name,
        })
    }
}

impl FromStr for ViewTransform {
    type Err = FedcoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "sum" => ViewTransform::Sum,
            "mean" => ViewTransform::Mean,
            "count" => ViewTransform::Count,
            "min" => ViewTransform::Min,
            "max" => ViewTransform::Max,
            "" => return Err(FedcoreError::InvalidArgument("empty view transform".into())),
            other => ViewTransform::Custom(other.to_string()),
        })
    }
}

impl From<ViewTransform> for String {
    fn from(t: ViewTransform) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for ViewTransform {
    type Error = FedcoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Number(f64),
    Text(String),
}

/// `column op value`; a view's filter is the conjunction of its conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub column: String,
    pub op: CmpOp,
    pub value: Literal,
}

impl Condition {
    fn holds(&self, cell: &Cell) -> bool {
        let ord = match (cell, &self.value) {
            (Cell::String(s), Literal::Text(t)) => s.as_str().cmp(t.as_str()),
            (c, Literal::Number(n)) => match c.as_f64() {
                Some(x) => match x.partial_cmp(n) {
                    Some(o) => o,
                    None => return false,
                },
                None => return false,
            },
            _ => return false,
        };
        use std::cmp::Ordering::*;
        match self.op {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub view_id: String,
    #[serde(default)]
    pub purpose: String,
    /// `table/column` refs on the members.
    pub source_refs: Vec<String>,
    #[serde(default)]
    pub filter: Vec<Condition>,
    pub transform: ViewTransform,
    pub output_schema: Vec<Column>,
    pub refresh_interval_ms: u64,
}

impl ViewSpec {
    /// Checks that need no member data.
    pub fn validate(&self, reducers: &ReducerRegistry) -> Vec<String> {
        let mut errs = Vec::new();
        if self.refresh_interval_ms == 0 {
            errs.push(format!("view {}: refresh_interval_ms must be positive", self.view_id));
        }
        if self.source_refs.is_empty() {
            errs.push(format!("view {}: needs at least one source", self.view_id));
        }
        for s in &self.source_refs {
            if split_source(s).is_none() {
                errs.push(format!("view {}: source {s:?} is not table/column", self.view_id));
            }
        }
        if let ViewTransform::Custom(name) = &self.transform {
            if !reducers.contains(name) {
                errs.push(format!("view {}: unknown transform {name:?}", self.view_id));
            }
        }
        let value_ty = if self.transform == ViewTransform::Count {
            ColumnType::Int
        } else {
            ColumnType::Float
        };
        let ok = self.output_schema.len() == 2
            && self.output_schema[0].ty == ColumnType::String
            && self.output_schema[1].ty == value_ty;
        if !ok {
            errs.push(format!(
                "view {}: output_schema must be (string source, {value_ty} value) for {}",
                self.view_id, self.transform
            ));
        }
        errs
    }
}

/// Split `table/column` at the last slash.
pub fn split_source(source: &str) -> Option<(&str, &str)> {
    let (t, c) = source.rsplit_once('/')?;
    (!t.is_empty() && !c.is_empty()).then_some((t, c))
}

pub type PartialFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
pub type CombineFn = dyn Fn(&[Vec<f64>]) -> Option<f64> + Send + Sync;

#[derive(Clone)]
pub struct Reducer {
    pub partial: Arc<PartialFn>,
    pub combine: Arc<CombineFn>,
}

#[derive(Clone, Default)]
pub struct ReducerRegistry {
    custom: BTreeMap<String, Reducer>,
}

impl fmt::Debug for ReducerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.custom.keys()).finish()
    }
}

fn sum_col(parts: &[Vec<f64>], i: usize) -> f64 {
    parts.iter().map(|p| p[i]).sum()
}

impl ReducerRegistry {
    pub fn register(&mut self, name: &str, reducer: Reducer) {
        self.custom.insert(name.into(), reducer);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.custom.contains_key(name)
    }

    pub fn partial(&self, t: &ViewTransform, values: &[f64]) -> Result<Vec<f64>, FedcoreError> {
        let n = values.len() as f64;
        Ok(match t {
            ViewTransform::Sum => vec![values.iter().sum()],
            ViewTransform::Mean => vec![values.iter().sum(), n],
            ViewTransform::Count => vec![n],
            ViewTransform::Min => values.iter().copied().reduce(f64::min).into_iter().collect(),
            ViewTransform::Max => values.iter().copied().reduce(f64::max).into_iter().collect(),
            ViewTransform::Custom(name) => (self.get(name)?.partial)(values),
        })
    }

    /// Combine partials, listed in member order. `None` when nothing contributed.
    pub fn combine(&self, t: &ViewTransform, parts: &[Vec<f64>]) -> Result<Option<f64>, FedcoreError> {
        let width = match t {
            ViewTransform::Sum | ViewTransform::Count => Some(1),
            ViewTransform::Mean => Some(2),
            _ => None,
        };
        if let Some(w) = width {
            if parts.iter().any(|p| p.len() != w) {
                return Err(FedcoreError::InvalidArgument(format!("malformed {t} partial")));
            }
        }
        Ok(match t {
            _ if parts.is_empty() => None,
            ViewTransform::Sum => Some(sum_col(parts, 0)),
            ViewTransform::Count => Some(sum_col(parts, 0)),
            ViewTransform::Mean => {
                let count = sum_col(parts, 1);
                (count > 0.0).then(|| sum_col(parts, 0) / count)
            }
            ViewTransform::Min => parts.iter().flatten().copied().reduce(f64::min),
            ViewTransform::Max => parts.iter().flatten().copied().reduce(f64::max),
            ViewTransform::Custom(name) => (self.get(name)?.combine)(parts),
        })
    }

    fn get(&self, name: &str) -> Result<&Reducer, FedcoreError> {
        self.custom
            .get(name)
            .ok_or_else(|| FedcoreError::InvalidArgument(format!("unknown view transform {name:?}")))
    }
}

/// Member side: the partial for one source over this fedlet's table.
pub fn member_partial(
    table: &DataTable,
    column: &str,
    filter: &[Condition],
    transform: &ViewTransform,
    reducers: &ReducerRegistry,
) -> Result<Vec<f64>, FedcoreError> {
    let col = table
        .column_index(column)
        .ok_or_else(|| FedcoreError::NotFound(format!("column {}/{column}", table.table_id)))?;
    if !table.schema[col].ty.is_numeric() {
        return Err(FedcoreError::InvalidArgument(format!("column {column} is not numeric")));
    }
    let conds = filter
        .iter()
        .map(|c| {
            table
                .column_index(&c.column)
                .map(|i| (i, c))
                .ok_or_else(|| FedcoreError::NotFound(format!("filter column {}", c.column)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = table
        .rows
        .iter()
        .filter(|row| conds.iter().all(|(i, c)| c.holds(&row[*i])))
        .filter_map(|row| row[col].as_f64())
        .collect();
    reducers.partial(transform, &values)
}

/// Community side: rows from the partials of eligible members.
pub fn combine_rows(
    spec: &ViewSpec,
    partials: &BTreeMap<FedId, Vec<Vec<f64>>>,
    reducers: &ReducerRegistry,
) -> Result<Vec<Vec<Cell>>, FedcoreError> {
    let mut rows = Vec::new();
    for (i, source) in spec.source_refs.iter().enumerate() {
        let parts: Vec<Vec<f64>> = partials.values().filter_map(|p| p.get(i).cloned()).collect();
        if let Some(v) = reducers.combine(&spec.transform, &parts)? {
            let value = if spec.transform == ViewTransform::Count {
                Cell::Int(v as i64)
            } else {
                Cell::Float(v)
            };
            rows.push(vec![Cell::String(source.clone()), value]);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(values: &[(f64, &str)]) -> DataTable {
        let mut t = DataTable::new(
            "readings",
            vec![Column::new("pm25", ColumnType::Float), Column::new("zone", ColumnType::String)],
        )
        .unwrap();
        for (v, z) in values {
            t.insert(vec![Cell::Float(*v), Cell::String(z.to_string())]).unwrap();
        }
        t
    }

    fn spec(t: ViewTransform) -> ViewSpec {
        let vt = if t == ViewTransform::Count { ColumnType::Int } else { ColumnType::Float };
        ViewSpec {
            view_id: "v".into(),
            purpose: String::new(),
            source_refs: vec!["readings/pm25".into()],
            filter: vec![],
            transform: t,
            output_schema: vec![Column::new("source", ColumnType::String), Column::new("value", vt)],
            refresh_interval_ms: 1000,
        }
    }

    fn run(t: ViewTransform, members: &[&[(f64, &str)]]) -> Vec<Vec<Cell>> {
        let r = ReducerRegistry::default();
        let s = spec(t);
        let partials: BTreeMap<FedId, Vec<Vec<f64>>> = members
            .iter()
            .enumerate()
            .map(|(i, vals)| {
                let p = member_partial(&table(vals), "pm25", &s.filter, &s.transform, &r).unwrap();
                (FedId::new(format!("m{i}")).unwrap(), vec![p])
            })
            .collect();
        combine_rows(&s, &partials, &r).unwrap()
    }

    fn value(rows: &[Vec<Cell>]) -> f64 {
        rows[0][1].as_f64().unwrap()
    }

    #[test]
    fn builtin_transforms_match_pooled_computation() {
        let members: [&[(f64, &str)]; 3] = [&[(10.0, "a")], &[(20.0, "a"), (40.0, "b")], &[(30.0, "b")]];
        assert_eq!(value(&run(ViewTransform::Sum, &members)), 100.0);
        assert_eq!(value(&run(ViewTransform::Mean, &members)), 25.0);
        assert_eq!(value(&run(ViewTransform::Min, &members)), 10.0);
        assert_eq!(value(&run(ViewTransform::Max, &members)), 40.0);
        assert_eq!(run(ViewTransform::Count, &members)[0][1], Cell::Int(4));
        let three: [&[(f64, &str)]; 3] = [&[(10.0, "a")], &[(20.0, "a")], &[(30.0, "a")]];
        assert_eq!(value(&run(ViewTransform::Mean, &three)), 20.0);
    }

    #[test]
    fn no_sources_gives_empty_view() {
        assert!(run(ViewTransform::Mean, &[]).is_empty());
        assert!(run(ViewTransform::Max, &[&[]]).is_empty());
    }

    #[test]
    fn filter_applies_before_reduction() {
        let r = ReducerRegistry::default();
        let t = table(&[(10.0, "a"), (20.0, "b"), (35.0, "b")]);
        let f = vec![
            Condition { column: "zone".into(), op: CmpOp::Eq, value: Literal::Text("b".into()) },
            Condition { column: "pm25".into(), op: CmpOp::Lt, value: Literal::Number(30.0) },
        ];
        assert_eq!(member_partial(&t, "pm25", &f, &ViewTransform::Sum, &r).unwrap(), vec![20.0]);
    }

    #[test]
    fn custom_reducer() {
        let mut r = ReducerRegistry::default();
        r.register(
            "sumsq",
            Reducer {
                partial: Arc::new(|v| vec![v.iter().map(|x| x * x).sum()]),
                combine: Arc::new(|p| Some(p.iter().map(|x| x[0]).sum())),
            },
        );
        let t = ViewTransform::Custom("sumsq".into());
        let p = member_partial(&table(&[(3.0, "a"), (4.0, "a")]), "pm25", &[], &t, &r).unwrap();
        assert_eq!(r.combine(&t, &[p]).unwrap(), Some(25.0));
    }

    #[test]
    fn spec_validation() {
        let r = ReducerRegistry::default();
        assert!(spec(ViewTransform::Mean).validate(&r).is_empty());
        let mut s = spec(ViewTransform::Count);
        s.output_schema[1].ty = ColumnType::Float;
        s.refresh_interval_ms = 0;
        s.transform = ViewTransform::Custom("nope".into());
        assert_eq!(s.validate(&r).len(), 2);
        s.source_refs = vec!["justtable".into()];
        assert_eq!(s.validate(&r).len(), 3);
    }
}
