//! Small policies shared by unit and integration tests.

use std::collections::BTreeSet;

use crate::credentials::PasswordHash;
use crate::model::{
    Account, AuthMethod, GateDb, Policy, Role, StateId, TokenBinding, Transition, User, Workflow,
    WorkflowId,
};
use crate::page::PageId;
use crate::rule::ParamRule;

/// States `s0..sN`, transition `i` going `s(i-1) -> s(i)` on `pages[i-1]`.
pub fn linear_workflow(id: &str, pages: &[PageId]) -> Workflow {
    let states: BTreeSet<StateId> = (0..=pages.len())
        .map(|i| StateId::new(format!("s{i}")))
        .collect();
    let transitions = pages
        .iter()
        .enumerate()
        .map(|(i, p)| Transition {
            id: (i + 1) as u32,
            from: StateId::new(format!("s{i}")),
            to: StateId::new(format!("s{}", i + 1)),
            page: p.clone(),
            params: Default::default(),
        })
        .collect();
    Workflow {
        id: WorkflowId::from(id),
        name: id.to_string(),
        states,
        start_state: "s0".into(),
        start_page: pages.first().cloned().unwrap_or_else(|| PageId::get("/")),
        transitions,
    }
}

fn role(id: &str, wfs: &[&str], auth: &[AuthMethod]) -> Role {
    Role {
        id: id.into(),
        name: id.to_string(),
        workflow_ids: wfs.iter().map(|w| WorkflowId::from(*w)).collect(),
        required_auth: auth.iter().copied().collect(),
    }
}

fn account(id: &str, roles: &[&str]) -> Account {
    Account {
        id: id.into(),
        federated_name: id.to_string(),
        role_ids: roles.iter().map(|r| (*r).into()).collect(),
        idp_id: "idp".to_string(),
        upstream: None,
    }
}

/// `w1` (orders: `/orders` then a guarded `POST /orders/new`) for role
/// `clerk`, `w2` (audit: `/audit`, `/audit/log`, `/audit/detail` over states
/// `t0..t3`) for role `auditor`. `alice` holds both roles, `bob` only clerk.
pub fn two_workflow_policy() -> Policy {
    let mut w1 = linear_workflow("w1", &[PageId::get("/orders"), PageId::post("/orders/new")]);
    w1.name = "Place order".to_string();
    w1.transitions[1]
        .params
        .insert("item".into(), ParamRule::regex("[A-Z]-[0-9]+").unwrap());

    let mut w2 = linear_workflow(
        "w2",
        &[
            PageId::get("/audit"),
            PageId::get("/audit/log"),
            PageId::get("/audit/detail"),
        ],
    );
    w2.name = "Review audit".to_string();
    let rename = |s: &StateId| StateId::new(s.as_str().replacen('s', "t", 1));
    w2.states = w2.states.iter().map(rename).collect();
    w2.start_state = rename(&w2.start_state);
    for t in &mut w2.transitions {
        t.from = rename(&t.from);
        t.to = rename(&t.to);
    }

    let mut p = Policy::default();
    for wf in [w1, w2] {
        p.workflows.insert(wf.id.clone(), wf);
    }
    for r in [
        role("clerk", &["w1"], &[AuthMethod::Password]),
        role(
            "auditor",
            &["w2"],
            &[AuthMethod::Password, AuthMethod::Token],
        ),
    ] {
        p.roles.insert(r.id.clone(), r);
    }
    for a in [
        account("alice", &["clerk", "auditor"]),
        account("bob", &["clerk"]),
    ] {
        p.accounts.insert(a.id.clone(), a);
    }
    p
}

/// [`two_workflow_policy`] with identity records. Passwords are
/// `<name>-pw`; alice owns token `(10, 4711)`.
pub fn two_workflow_db() -> GateDb {
    let policy = two_workflow_policy();
    let mut db = GateDb {
        policy: policy.clone(),
        ..GateDb::default()
    };
    for acct in policy.accounts.values() {
        let token = (acct.id.as_str() == "alice").then(|| TokenBinding {
            firm_code: "10".to_string(),
            user_code: "4711".to_string(),
        });
        db.upsert_user(User {
            id: acct.id.clone(),
            federated_name: acct.federated_name.clone(),
            role_ids: acct.role_ids.clone(),
            idp_id: acct.idp_id.clone(),
            password: PasswordHash::with_salt(
                &format!("{}-pw", acct.id),
                acct.id.as_str().as_bytes().to_vec(),
            ),
            token_binding: token,
            upstream_credentials: None,
        });
    }
    db
}
