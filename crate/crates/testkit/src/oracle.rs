//! Reference implementations written for clarity, not speed.

use std::collections::BTreeSet;

use gate_core::model::{StateId, Transition, Workflow};
use gate_core::monitor::MonitorRequest;
use gate_core::rule::{Operand, ParamRule, Params};
use gate_core::store::oracle::TableSnapshot;
use regex::Regex;

/// A host table as plain rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str], rows: &[&[&str]]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|v| v.to_string()).collect())
                .collect(),
        }
    }

    pub fn snapshot(tables: &[Table]) -> TableSnapshot {
        let mut snap = TableSnapshot::default();
        for t in tables {
            let cols: Vec<&str> = t.columns.iter().map(String::as_str).collect();
            snap.insert_table(&t.name, &cols, t.rows.clone())
                .expect("well-formed table");
        }
        snap
    }
}

/// `SELECT column FROM table WHERE c1 = v1 AND ...` by scanning every row.
pub fn select(
    tables: &[Table],
    table: &str,
    column: &str,
    filters: &[(String, String)],
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let Some(t) = tables.iter().find(|t| t.name == table) else {
        return out;
    };
    let idx = |c: &str| t.columns.iter().position(|x| x == c);
    let Some(target) = idx(column) else {
        return out;
    };
    'rows: for row in &t.rows {
        for (c, v) in filters {
            match idx(c) {
                Some(i) if row[i] == *v => {}
                _ => continue 'rows,
            }
        }
        out.insert(row[target].clone());
    }
    out
}

fn one_value(rule: &ParamRule, v: &str, params: &Params, tables: &[Table]) -> bool {
    match rule {
        ParamRule::Any => true,
        ParamRule::Literal { values } => values.len() == 1 && values[0] == v,
        ParamRule::Regex { pattern } => Regex::new(&format!("^(?:{})$", pattern.source()))
            .expect("pattern compiled once already")
            .is_match(v),
        ParamRule::SetQuery { query } => {
            let mut filters = Vec::new();
            for f in &query.filters {
                let operand = match &f.operand {
                    Operand::Value(x) => x.clone(),
                    Operand::Param(p) => match params.get(p) {
                        Some(vs) if vs.len() == 1 => vs[0].clone(),
                        _ => return false,
                    },
                };
                filters.push((f.column.clone(), operand));
            }
            select(tables, &query.table, &query.column, &filters).contains(v)
        }
    }
}

/// Whether a parameter carrying `values` satisfies `rule`. Literals compare
/// as multisets; every other rule must accept each value.
pub fn values_admitted(
    rule: &ParamRule,
    values: &[String],
    params: &Params,
    tables: &[Table],
) -> bool {
    if values.is_empty() {
        return false;
    }
    match rule {
        ParamRule::Literal { values: expected } => {
            let mut a = values.to_vec();
            let mut b = expected.clone();
            a.sort();
            b.sort();
            a == b
        }
        _ => values.iter().all(|v| one_value(rule, v, params, tables)),
    }
}

/// The request names exactly the transition's parameters and each is admitted.
pub fn transition_admits(t: &Transition, req: &MonitorRequest, tables: &[Table]) -> bool {
    if t.page != req.page {
        return false;
    }
    let names: BTreeSet<&String> = req.params.keys().collect();
    let wanted: BTreeSet<&String> = t.params.keys().collect();
    names == wanted
        && t.params
            .iter()
            .all(|(n, rule)| values_admitted(rule, &req.params[n], &req.params, tables))
}

/// Depth-first search for a path from the start state whose labels match
/// `seq` one transition per request.
pub fn path_exists(wf: &Workflow, seq: &[MonitorRequest], tables: &[Table]) -> bool {
    fn dfs(wf: &Workflow, at: &StateId, seq: &[MonitorRequest], tables: &[Table]) -> bool {
        let Some((first, rest)) = seq.split_first() else {
            return true;
        };
        wf.transitions
            .iter()
            .filter(|t| t.from == *at && transition_admits(t, first, tables))
            .any(|t| dfs(wf, &t.to, rest, tables))
    }
    dfs(wf, &wf.start_state, seq, tables)
}

/// Expected verdict for each request when `wf` is the only workflow the user
/// may run. A denied request leaves no trace, so request `k` is allowed iff
/// the allowed requests before it plus request `k` spell a path.
pub fn single_workflow_verdicts(
    wf: &Workflow,
    seq: &[MonitorRequest],
    tables: &[Table],
) -> Vec<bool> {
    let mut accepted: Vec<MonitorRequest> = Vec::new();
    seq.iter()
        .map(|r| {
            accepted.push(r.clone());
            let ok = path_exists(wf, &accepted, tables);
            if !ok {
                accepted.pop();
            }
            ok
        })
        .collect()
}
