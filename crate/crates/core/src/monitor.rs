//! The reference monitor.
//!
//! Every session carries a set of workflow instances. Each instance tracks
//! the *set* of states it may currently be in, so a request is admissible
//! exactly when some path through the workflow is consistent with everything
//! the session has done so far. A request is allowed if at least one active
//! instance can advance on it or if it is the first step of a workflow the
//! user may start. A denied request leaves the session untouched so the user
//! can retry with different parameters.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{allowed_workflows, Account, Policy, StateId, Transition, Workflow, WorkflowId};
use crate::page::PageId;
use crate::rule::{values_match, HostState, OracleUnavailable, Params};
use crate::session::{Session, WorkflowInstance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorRequest {
    pub page: PageId,
    #[serde(default)]
    pub params: Params,
}

impl MonitorRequest {
    pub fn new(page: PageId) -> Self {
        MonitorRequest {
            page,
            params: Params::new(),
        }
    }

    pub fn param(mut self, name: &str, value: &str) -> Self {
        self.params
            .entry(name.to_string())
            .or_default()
            .push(value.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoSuccessor,
    NotAuthorised,
    ExclusionViolated,
    OracleError,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::NoSuccessor => "NoSuccessor",
            DenyReason::NotAuthorised => "NotAuthorised",
            DenyReason::ExclusionViolated => "ExclusionViolated",
            DenyReason::OracleError => "OracleError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Decision {
    Allow {
        advanced: Vec<(WorkflowId, BTreeSet<StateId>)>,
        spawned: Vec<WorkflowId>,
        deactivated: Vec<WorkflowId>,
    },
    Deny {
        reason: DenyReason,
        /// `None` only when the user may run no workflow at all.
        fallback: Option<PageId>,
    },
}

impl Decision {
    pub fn is_allow(&self) -> bool {
        matches!(self, Decision::Allow { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MonitorError {
    #[error("the user's roles grant no workflow")]
    NoWorkflowAvailable,
}

fn params_match(
    t: &Transition,
    request: &MonitorRequest,
    oracle: &dyn HostState,
) -> Result<bool, OracleUnavailable> {
    // Surplus parameters fail the match.
    if request.params.keys().any(|k| !t.params.contains_key(k)) {
        return Ok(false);
    }
    for (name, rule) in &t.params {
        let Some(values) = request.params.get(name) else {
            return Ok(false);
        };
        if !values_match(rule, values, &request.params, oracle)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// States reachable from `current` by one transition labelled with the
/// request's page whose parameter rules all accept the request.
pub fn successor_set(
    workflow: &Workflow,
    current: &BTreeSet<StateId>,
    request: &MonitorRequest,
    oracle: &dyn HostState,
) -> Result<BTreeSet<StateId>, OracleUnavailable> {
    let mut next = BTreeSet::new();
    for t in &workflow.transitions {
        if t.page == request.page
            && current.contains(&t.from)
            && !next.contains(&t.to)
            && params_match(t, request, oracle)?
        {
            next.insert(t.to.clone());
        }
    }
    Ok(next)
}

/// True iff an exclusion set pairs `candidate` with a workflow already
/// instantiated in this session.
pub fn apply_exclusion(session: &Session, candidate: &WorkflowId, policy: &Policy) -> bool {
    excluded_by(candidate, &session.touched, policy)
}

fn excluded_by(candidate: &WorkflowId, touched: &BTreeSet<WorkflowId>, policy: &Policy) -> bool {
    policy.exclusions.values().any(|ex| {
        ex.workflow_ids.contains(candidate)
            && ex
                .workflow_ids
                .iter()
                .any(|w| w != candidate && touched.contains(w))
    })
}

/// Page offered after a denial: the configured base page, else the start
/// page of the lowest-id workflow the user may run.
pub fn fallback_page(
    account: &Account,
    policy: &Policy,
    base_page: Option<&PageId>,
) -> Result<PageId, MonitorError> {
    if let Some(p) = base_page {
        return Ok(p.clone());
    }
    let allowed = allowed_workflows(account, policy).unwrap_or_default();
    allowed
        .iter()
        .find_map(|id| policy.workflows.get(id))
        .map(|wf| wf.start_page.clone())
        .ok_or(MonitorError::NoWorkflowAvailable)
}

struct Plan {
    advanced: Vec<(usize, BTreeSet<StateId>)>,
    deactivated: Vec<usize>,
    spawned: Vec<(WorkflowId, BTreeSet<StateId>)>,
}

/// Decides one request and, on `Allow`, applies it to `session`. A `Deny`
/// never mutates the session.
pub fn evaluate(
    session: &mut Session,
    request: &MonitorRequest,
    policy: &Policy,
    oracle: &dyn HostState,
    base_page: Option<&PageId>,
    now: i64,
) -> Decision {
    let Some(account) = policy.accounts.get(&session.user_id) else {
        return Decision::Deny {
            reason: DenyReason::NotAuthorised,
            fallback: base_page.cloned(),
        };
    };
    let deny = |reason| Decision::Deny {
        reason,
        fallback: fallback_page(account, policy, base_page).ok(),
    };
    let Ok(allowed) = allowed_workflows(account, policy) else {
        return deny(DenyReason::NotAuthorised);
    };

    let plan = match plan(session, request, policy, oracle, &allowed) {
        Ok(Ok(plan)) => plan,
        Ok(Err(reason)) => return deny(reason),
        Err(_) => return deny(DenyReason::OracleError),
    };

    let advanced = plan
        .advanced
        .iter()
        .map(|(i, set)| (session.instances[*i].workflow_id.clone(), set.clone()))
        .collect();
    let deactivated = plan
        .deactivated
        .iter()
        .map(|i| session.instances[*i].workflow_id.clone())
        .collect();
    let spawned = plan.spawned.iter().map(|(w, _)| w.clone()).collect();

    for (i, set) in plan.advanced {
        session.instances[i].current = set;
    }
    for i in plan.deactivated {
        session.instances[i].active = false;
    }
    for (wf, set) in plan.spawned {
        let fresh = WorkflowInstance {
            workflow_id: wf.clone(),
            current: set,
            active: true,
            started_at: now,
        };
        match session.instances.iter_mut().find(|i| i.workflow_id == wf) {
            Some(slot) => *slot = fresh,
            None => session.instances.push(fresh),
        }
        session.touched.insert(wf);
    }

    Decision::Allow {
        advanced,
        spawned,
        deactivated,
    }
}

fn plan(
    session: &Session,
    request: &MonitorRequest,
    policy: &Policy,
    oracle: &dyn HostState,
    allowed: &BTreeSet<WorkflowId>,
) -> Result<Result<Plan, DenyReason>, OracleUnavailable> {
    let mut advanced = Vec::new();
    let mut deactivated = Vec::new();
    for (i, inst) in session.instances.iter().enumerate() {
        if !inst.active {
            continue;
        }
        // Instances of workflows revoked since they started cannot advance.
        let next = match policy.workflows.get(&inst.workflow_id) {
            Some(wf) if allowed.contains(&inst.workflow_id) => {
                successor_set(wf, &inst.current, request, oracle)?
            }
            _ => BTreeSet::new(),
        };
        if next.is_empty() {
            deactivated.push(i);
        } else {
            advanced.push((i, next));
        }
    }

    let mut spawned: Vec<(WorkflowId, BTreeSet<StateId>)> = Vec::new();
    let mut touched = session.touched.clone();
    let mut blocked = false;
    for id in allowed {
        if session.instance(id).is_some_and(|i| i.active) {
            continue;
        }
        let Some(wf) = policy.workflows.get(id) else {
            continue;
        };
        let start: BTreeSet<StateId> = [wf.start_state.clone()].into_iter().collect();
        let next = successor_set(wf, &start, request, oracle)?;
        if next.is_empty() {
            continue;
        }
        if excluded_by(id, &touched, policy) {
            blocked = true;
            continue;
        }
        touched.insert(id.clone());
        spawned.push((id.clone(), next));
    }

    if advanced.is_empty() && spawned.is_empty() {
        let reason = if blocked {
            DenyReason::ExclusionViolated
        } else {
            DenyReason::NoSuccessor
        };
        return Ok(Err(reason));
    }
    Ok(Ok(Plan {
        advanced,
        deactivated,
        spawned,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{linear_workflow, two_workflow_policy};
    use crate::model::{AuthMethod, ExclusionSet, Role, UserId};
    use crate::rule::ParamRule;
    use crate::session::SessionId;
    use crate::store::oracle::TableSnapshot;

    fn set(ids: &[&str]) -> BTreeSet<StateId> {
        ids.iter().map(|s| StateId::from(*s)).collect()
    }

    fn session_for(user: &str) -> Session {
        Session::new(
            SessionId::from_bytes([7; 16]),
            UserId::from(user),
            [AuthMethod::Password, AuthMethod::Token]
                .into_iter()
                .collect(),
            0,
            0,
        )
    }

    #[test]
    fn linear_successors() {
        let wf = linear_workflow("w", &[PageId::get("/a"), PageId::get("/b")]);
        let oracle = TableSnapshot::default();
        let a = MonitorRequest::new(PageId::get("/a"));
        let b = MonitorRequest::new(PageId::get("/b"));
        assert_eq!(
            successor_set(&wf, &set(&["s0"]), &a, &oracle).unwrap(),
            set(&["s1"])
        );
        assert!(successor_set(&wf, &set(&["s0"]), &b, &oracle)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn branching_successors() {
        let mut wf = linear_workflow("w", &[PageId::get("/a")]);
        wf.states.insert("s2".into());
        wf.transitions[0]
            .params
            .insert("mode".into(), ParamRule::literal("x"));
        wf.transitions.push(Transition {
            id: 2,
            from: "s0".into(),
            to: "s2".into(),
            page: PageId::get("/a"),
            params: [("mode".to_string(), ParamRule::regex("^x|y$").unwrap())]
                .into_iter()
                .collect(),
        });
        let oracle = TableSnapshot::default();
        let req = MonitorRequest::new(PageId::get("/a")).param("mode", "x");
        assert_eq!(
            successor_set(&wf, &set(&["s0"]), &req, &oracle).unwrap(),
            set(&["s1", "s2"])
        );
        let req = MonitorRequest::new(PageId::get("/a")).param("mode", "y");
        assert_eq!(
            successor_set(&wf, &set(&["s0"]), &req, &oracle).unwrap(),
            set(&["s2"])
        );
    }

    #[test]
    fn surplus_and_missing_params_fail() {
        let mut wf = linear_workflow("w", &[PageId::get("/a")]);
        wf.transitions[0].params.insert("q".into(), ParamRule::Any);
        let oracle = TableSnapshot::default();
        let start = set(&["s0"]);
        let bare = MonitorRequest::new(PageId::get("/a"));
        assert!(successor_set(&wf, &start, &bare, &oracle)
            .unwrap()
            .is_empty());
        let ok = bare.clone().param("q", "1");
        assert_eq!(
            successor_set(&wf, &start, &ok, &oracle).unwrap(),
            set(&["s1"])
        );
        let surplus = ok.param("debug", "1");
        assert!(successor_set(&wf, &start, &surplus, &oracle)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn fresh_session_spawns_on_start_page() {
        let policy = two_workflow_policy();
        let mut s = session_for("bob");
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/orders")),
            &policy,
            &TableSnapshot::default(),
            None,
            5,
        );
        assert_eq!(
            d,
            Decision::Allow {
                advanced: vec![],
                spawned: vec!["w1".into()],
                deactivated: vec![]
            }
        );
        assert_eq!(s.instances.len(), 1);
        assert_eq!(s.instances[0].current, set(&["s1"]));
        assert_eq!(s.instances[0].started_at, 5);
    }

    #[test]
    fn fresh_session_off_path_is_denied() {
        let policy = two_workflow_policy();
        let mut s = session_for("bob");
        let before = s.snapshot();
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/audit")),
            &policy,
            &TableSnapshot::default(),
            None,
            5,
        );
        assert_eq!(
            d,
            Decision::Deny {
                reason: DenyReason::NoSuccessor,
                fallback: Some(PageId::get("/orders"))
            }
        );
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn diverging_instance_is_deactivated() {
        // alice runs both workflows: w1 sits in s1, w2 sits in t3.
        let policy = two_workflow_policy();
        let oracle = TableSnapshot::default();
        let mut s = session_for("alice");
        for (wf, state) in [("w1", "s1"), ("w2", "t3")] {
            s.instances.push(WorkflowInstance {
                workflow_id: wf.into(),
                current: set(&[state]),
                active: true,
                started_at: 0,
            });
            s.touched.insert(wf.into());
        }

        let req = MonitorRequest::new(PageId::post("/orders/new")).param("item", "A-7");
        let d = evaluate(&mut s, &req, &policy, &oracle, None, 2);
        assert_eq!(
            d,
            Decision::Allow {
                advanced: vec![("w1".into(), set(&["s2"]))],
                spawned: vec![],
                deactivated: vec!["w2".into()]
            }
        );
        assert!(!s.instance(&"w2".into()).unwrap().active);
        // w2 may be started again from its first page.
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/audit")),
            &policy,
            &oracle,
            None,
            3,
        );
        assert!(
            matches!(d, Decision::Allow { ref spawned, .. } if spawned == &vec![WorkflowId::from("w2")])
        );
    }

    #[test]
    fn oracle_failure_denies_without_mutation() {
        struct Down;
        impl HostState for Down {
            fn select(
                &self,
                _: &str,
                _: &str,
                _: &[(&str, &str)],
            ) -> Result<BTreeSet<String>, OracleUnavailable> {
                Err(OracleUnavailable("down".into()))
            }
        }
        let mut policy = two_workflow_policy();
        let wf = policy.workflows.get_mut(&WorkflowId::from("w1")).unwrap();
        wf.transitions[0].params.insert(
            "sku".into(),
            ParamRule::set_query(crate::rule::SetQueryDef::new("stock", "sku")).unwrap(),
        );
        let mut s = session_for("bob");
        let before = s.snapshot();
        let req = MonitorRequest::new(PageId::get("/orders")).param("sku", "A");
        let d = evaluate(&mut s, &req, &policy, &Down, None, 1);
        assert!(matches!(
            d,
            Decision::Deny {
                reason: DenyReason::OracleError,
                ..
            }
        ));
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn exclusion_blocks_second_workflow() {
        let mut policy = two_workflow_policy();
        policy.exclusions.insert(
            "wall".into(),
            ExclusionSet {
                id: "wall".into(),
                workflow_ids: ["w1".into(), "w2".into()].into_iter().collect(),
            },
        );
        let oracle = TableSnapshot::default();
        let mut s = session_for("alice");
        assert!(!apply_exclusion(&s, &"w2".into(), &policy));
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/orders")),
            &policy,
            &oracle,
            None,
            1,
        );
        assert!(d.is_allow());
        assert!(apply_exclusion(&s, &"w2".into(), &policy));
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/audit")),
            &policy,
            &oracle,
            None,
            1,
        );
        assert!(matches!(
            d,
            Decision::Deny {
                reason: DenyReason::ExclusionViolated,
                ..
            }
        ));
        // still blocked after w1 is no longer active
        s.instances[0].active = false;
        assert!(apply_exclusion(&s, &"w2".into(), &policy));
    }

    #[test]
    fn exclusion_vacuous_without_sets() {
        let policy = two_workflow_policy();
        let mut s = session_for("alice");
        s.touched.insert("w1".into());
        assert!(!apply_exclusion(&s, &"w2".into(), &policy));
    }

    #[test]
    fn simultaneous_spawn_respects_exclusion() {
        let mut policy = two_workflow_policy();
        // give w2 the same first page as w1
        let w2 = policy.workflows.get_mut(&WorkflowId::from("w2")).unwrap();
        w2.transitions[0].page = PageId::get("/orders");
        w2.start_page = PageId::get("/orders");
        policy.exclusions.insert(
            "wall".into(),
            ExclusionSet {
                id: "wall".into(),
                workflow_ids: ["w1".into(), "w2".into()].into_iter().collect(),
            },
        );
        let mut s = session_for("alice");
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/orders")),
            &policy,
            &TableSnapshot::default(),
            None,
            1,
        );
        assert!(
            matches!(d, Decision::Allow { ref spawned, .. } if spawned == &vec![WorkflowId::from("w1")])
        );
    }

    #[test]
    fn fallback_pages() {
        let mut policy = two_workflow_policy();
        let alice = policy.accounts[&UserId::from("alice")].clone();
        let base = PageId::get("/");
        assert_eq!(fallback_page(&alice, &policy, Some(&base)).unwrap(), base);
        // w1 (/orders) sorts before w2 (/audit)
        assert_eq!(
            fallback_page(&alice, &policy, None).unwrap(),
            PageId::get("/orders")
        );
        // ordering follows workflow ids, not insertion
        let mut w0 = policy.workflows[&WorkflowId::from("w2")].clone();
        w0.id = "w0".into();
        policy.workflows.insert("w0".into(), w0);
        policy
            .roles
            .get_mut(&crate::model::RoleId::from("auditor"))
            .unwrap()
            .workflow_ids
            .insert("w0".into());
        assert_eq!(
            fallback_page(&alice, &policy, None).unwrap(),
            PageId::get("/audit")
        );

        policy.roles.insert(
            "none".into(),
            Role {
                id: "none".into(),
                name: "none".into(),
                workflow_ids: BTreeSet::new(),
                required_auth: [AuthMethod::Password].into_iter().collect(),
            },
        );
        let mut idle = alice.clone();
        idle.role_ids = ["none".into()].into_iter().collect();
        assert_eq!(
            fallback_page(&idle, &policy, None),
            Err(MonitorError::NoWorkflowAvailable)
        );
    }

    #[test]
    fn unknown_user_is_not_authorised() {
        let policy = two_workflow_policy();
        let mut s = session_for("mallory");
        let d = evaluate(
            &mut s,
            &MonitorRequest::new(PageId::get("/orders")),
            &policy,
            &TableSnapshot::default(),
            None,
            1,
        );
        assert!(matches!(
            d,
            Decision::Deny {
                reason: DenyReason::NotAuthorised,
                ..
            }
        ));
    }
}
