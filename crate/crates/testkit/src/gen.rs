//! Random valid databases.

use std::collections::{BTreeMap, BTreeSet};

use gate_core::credentials::PasswordHash;
use gate_core::model::{
    AuthMethod, ExclusionId, ExclusionSet, GateDb, Policy, Role, RoleId, StateId, TokenBinding,
    Transition, UpstreamCredentials, User, UserId, Workflow, WorkflowId,
};
use gate_core::page::PageId;
use gate_core::rule::{ParamRule, SetQueryDef};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Awkward strings for serializer tests: markup, quotes, whitespace
/// controls, non-ASCII.
const AWKWARD: &[&str] = &[
    "plain",
    "a b",
    "<tag attr=\"v\">",
    "&amp; & &#38;",
    "it's",
    "tab\there",
    "line\nbreak",
    "cr\rlf\r\n",
    "  padded  ",
    "ünïcödé ✓",
    "]]>",
    "A-7",
];

fn awkward<R: Rng>(rng: &mut R) -> String {
    let s = AWKWARD.choose(rng).expect("non-empty");
    if rng.random_bool(0.3) {
        format!("{s}{}", rng.random_range(0..1000))
    } else {
        s.to_string()
    }
}

fn random_rule<R: Rng>(rng: &mut R, params: &[&str]) -> ParamRule {
    match rng.random_range(0..5) {
        0 => ParamRule::literal(&awkward(rng)),
        1 => ParamRule::literal_multiset((0..rng.random_range(1..4)).map(|_| awkward(rng))),
        2 => {
            let p = ["[0-9]+", "a|b", "[A-Z]-[0-9]{1,3}", "x<y>&\"z\"", ".*"]
                .choose(rng)
                .expect("non-empty");
            ParamRule::regex(p).expect("fixed patterns compile")
        }
        3 => {
            let mut q = SetQueryDef::new(
                ["stock", "accounts", "t_1"].choose(rng).expect("non-empty"),
                ["sku", "id", "owner"].choose(rng).expect("non-empty"),
            );
            for _ in 0..rng.random_range(0..3) {
                let col = ["in_stock", "region", "kind"]
                    .choose(rng)
                    .expect("non-empty");
                q = if rng.random_bool(0.5) {
                    q.filter_value(col, &awkward(rng))
                } else {
                    q.filter_param(col, params.choose(rng).expect("non-empty"))
                };
            }
            ParamRule::set_query(q).expect("identifiers are valid")
        }
        _ => ParamRule::Any,
    }
}

fn random_workflow<R: Rng>(rng: &mut R, id: &str) -> Workflow {
    const PARAMS: &[&str] = &["q", "id", "sku", "item", "a&b", "x<y"];
    let states: Vec<StateId> = (0..rng.random_range(2..=6))
        .map(|i| StateId::new(format!("st{i}")))
        .collect();
    let page = |rng: &mut R| {
        let path = format!("/p{}", rng.random_range(0..5));
        if rng.random_bool(0.7) {
            PageId::get(&path)
        } else {
            PageId::post(&path)
        }
    };
    let mut transitions = Vec::new();
    for i in 0..rng.random_range(1..=8) {
        let from = if i == 0 {
            states[0].clone()
        } else {
            states.choose(rng).expect("non-empty").clone()
        };
        let mut params = BTreeMap::new();
        for _ in 0..rng.random_range(0..3) {
            let name = PARAMS.choose(rng).expect("non-empty");
            params.insert(name.to_string(), random_rule(rng, PARAMS));
        }
        transitions.push(Transition {
            id: (i + 1) as u32 * 10,
            from,
            to: states.choose(rng).expect("non-empty").clone(),
            page: page(rng),
            params,
        });
    }
    let mut wf = Workflow {
        id: WorkflowId::from(id),
        name: awkward(rng),
        start_state: states[0].clone(),
        start_page: transitions[0].page.clone(),
        states: states.into_iter().collect(),
        transitions,
    };
    wf.dedup_transitions();
    wf
}

/// A random database that passes validation, with awkward strings wherever
/// free text is allowed.
pub fn random_db<R: Rng>(rng: &mut R) -> GateDb {
    let mut p = Policy::default();
    let n_wf = rng.random_range(1..=4);
    let wf_ids: Vec<WorkflowId> = (0..n_wf)
        .map(|i| WorkflowId::new(format!("wf-{i}")))
        .collect();
    for id in &wf_ids {
        p.workflows
            .insert(id.clone(), random_workflow(rng, id.as_str()));
    }
    let n_roles = rng.random_range(1..=3);
    let methods = [
        vec![AuthMethod::Password],
        vec![AuthMethod::Password, AuthMethod::Token],
        vec![AuthMethod::Token],
    ];
    for r in 0..n_roles {
        let wfs: Vec<&str> = wf_ids
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n_roles == r || rng.random_bool(0.3))
            .map(|(_, w)| w.as_str())
            .collect();
        let role = Role {
            id: RoleId::new(format!("role.{r}")),
            name: awkward(rng),
            workflow_ids: wfs.iter().map(|w| WorkflowId::from(*w)).collect(),
            required_auth: methods
                .choose(rng)
                .expect("non-empty")
                .iter()
                .copied()
                .collect(),
        };
        p.roles.insert(role.id.clone(), role);
    }
    if n_wf >= 2 && rng.random_bool(0.5) {
        let members: BTreeSet<WorkflowId> = wf_ids
            .iter()
            .take(rng.random_range(2..=n_wf))
            .cloned()
            .collect();
        let x = ExclusionSet {
            id: ExclusionId::from("chinese-wall"),
            workflow_ids: members,
        };
        p.exclusions.insert(x.id.clone(), x);
    }
    let role_ids: Vec<_> = p.roles.keys().cloned().collect();
    let mut db = GateDb {
        policy: p,
        ..GateDb::default()
    };
    for u in 0..rng.random_range(0..=3) {
        let mut roles: BTreeSet<_> =
            BTreeSet::from([role_ids.choose(rng).expect("non-empty").clone()]);
        if rng.random_bool(0.3) {
            roles.extend(role_ids.iter().cloned());
        }
        db.upsert_user(User {
            id: UserId::new(format!("u{u}")),
            federated_name: format!("{} #{u}", awkward(rng)),
            role_ids: roles,
            idp_id: "idp".to_string(),
            password: PasswordHash {
                hash: (0..32).map(|_| rng.random()).collect(),
                salt: (0..16).map(|_| rng.random()).collect(),
            },
            token_binding: rng.random_bool(0.5).then(|| TokenBinding {
                firm_code: awkward(rng),
                user_code: rng.random_range(0..100_000).to_string(),
            }),
            upstream_credentials: rng.random_bool(0.5).then(|| UpstreamCredentials {
                username: awkward(rng),
                secret: awkward(rng),
            }),
        });
    }
    db
}

/// One randomized monitor scenario: a workflow of at most six states, at
/// most six requests, and the host tables its set queries read.
#[derive(Debug, Clone)]
pub struct MonitorCase {
    pub workflow: Workflow,
    pub requests: Vec<gate_core::monitor::MonitorRequest>,
    pub tables: Vec<crate::Table>,
}

pub fn stock_tables() -> Vec<crate::Table> {
    vec![crate::Table::new(
        "stock",
        &["sku", "in_stock", "region"],
        &[
            &["A-7", "yes", "north"],
            &["B-2", "no", "north"],
            &["C-3", "yes", "south"],
        ],
    )]
}

const CASE_PAGES: &[(&str, bool)] = &[("/a", false), ("/b", false), ("/c", true)];
const CASE_VALUES: &[&str] = &["1", "2", "ab", "A-7", "B-2", "C-3", "north", "south"];

fn case_rule<R: Rng>(rng: &mut R) -> ParamRule {
    match rng.random_range(0..6) {
        0 => ParamRule::literal(CASE_VALUES.choose(rng).expect("non-empty")),
        1 => ParamRule::literal_multiset(["1", "2"]),
        2 => ParamRule::regex("[0-9]+").expect("valid"),
        3 => ParamRule::regex("[a-z]+").expect("valid"),
        4 => ParamRule::Any,
        _ => {
            let q = if rng.random_bool(0.5) {
                SetQueryDef::new("stock", "sku").filter_value("in_stock", "yes")
            } else {
                SetQueryDef::new("stock", "sku").filter_param("region", "y")
            };
            ParamRule::set_query(q).expect("valid")
        }
    }
}

/// Values a rule would accept, used to aim requests at transitions.
fn satisfying<R: Rng>(rng: &mut R, rule: &ParamRule) -> Vec<String> {
    match rule {
        ParamRule::Literal { values } => values.clone(),
        ParamRule::Regex { pattern } if pattern.source() == "[0-9]+" => vec!["1".into()],
        ParamRule::Regex { .. } => vec!["ab".into()],
        ParamRule::SetQuery { .. } => {
            vec![["A-7", "C-3"].choose(rng).expect("non-empty").to_string()]
        }
        ParamRule::Any => vec![CASE_VALUES.choose(rng).expect("non-empty").to_string()],
    }
}

pub fn monitor_case<R: Rng>(rng: &mut R) -> MonitorCase {
    use gate_core::monitor::MonitorRequest;

    let n_states = rng.random_range(1..=6);
    let state = |i: usize| StateId::new(format!("q{i}"));
    let page = |rng: &mut R| {
        let (path, post) = CASE_PAGES.choose(rng).expect("non-empty");
        if *post {
            PageId::post(path)
        } else {
            PageId::get(path)
        }
    };
    let mut transitions = Vec::new();
    for i in 0..rng.random_range(1..=10) {
        let from = if i == 0 {
            0
        } else {
            rng.random_range(0..n_states)
        };
        let mut params = BTreeMap::new();
        for name in ["x", "y"] {
            if rng.random_bool(0.35) {
                params.insert(name.to_string(), case_rule(rng));
            }
        }
        transitions.push(Transition {
            id: i + 1,
            from: state(from),
            to: state(rng.random_range(0..n_states)),
            page: page(rng),
            params,
        });
    }
    let workflow = Workflow {
        id: WorkflowId::from("w"),
        name: "case".to_string(),
        states: (0..n_states).map(state).collect(),
        start_state: state(0),
        start_page: transitions[0].page.clone(),
        transitions,
    };

    let mut requests = Vec::new();
    for _ in 0..rng.random_range(1..=6) {
        let req = if rng.random_bool(0.7) {
            let t = workflow.transitions.choose(rng).expect("non-empty");
            let mut r = MonitorRequest::new(t.page.clone());
            for (name, rule) in &t.params {
                r.params.insert(name.clone(), satisfying(rng, rule));
            }
            if r.params.contains_key("x") && !r.params.contains_key("y") && rng.random_bool(0.3) {
                r.params.insert("y".into(), vec!["north".into()]);
            }
            r
        } else {
            let mut r = MonitorRequest::new(page(rng));
            for name in ["x", "y", "z"] {
                if rng.random_bool(0.3) {
                    let n = rng.random_range(1..=2);
                    r.params.insert(
                        name.to_string(),
                        (0..n)
                            .map(|_| CASE_VALUES.choose(rng).expect("non-empty").to_string())
                            .collect(),
                    );
                }
            }
            r
        };
        requests.push(req);
    }
    MonitorCase {
        workflow,
        requests,
        tables: stock_tables(),
    }
}
