//! Referential-integrity and invariant checks over a whole policy.

use std::collections::{BTreeSet, HashSet};

use serde::Serialize;

use crate::model::{is_identifier, GateDb, Policy, RoleId, StateId, UserId, WorkflowId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, thiserror::Error)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    #[error("`{id}` is not a valid identifier")]
    InvalidIdentifier { id: String },
    #[error("entry keyed `{key}` carries id `{id}`")]
    IdMismatch { key: String, id: String },
    #[error("workflow `{workflow}` references undeclared state `{state}`")]
    UnknownState {
        workflow: WorkflowId,
        state: StateId,
    },
    #[error("workflow `{workflow}` has two transitions with id {transition}")]
    DuplicateTransitionId {
        workflow: WorkflowId,
        transition: u32,
    },
    #[error("workflow `{workflow}` transition {transition} duplicates an earlier one")]
    DuplicateTransition {
        workflow: WorkflowId,
        transition: u32,
    },
    #[error("workflow `{workflow}` start page is not the page of any transition leaving its start state")]
    StartPageMismatch { workflow: WorkflowId },
    #[error("workflow `{workflow}` transition {transition} parameter `{param}`: {message}")]
    InvalidRule {
        workflow: WorkflowId,
        transition: u32,
        param: String,
        message: String,
    },
    #[error("workflow `{workflow}` is not allowed by any role")]
    UnreachableWorkflow { workflow: WorkflowId },
    #[error("role `{role}` references missing workflow `{workflow}`")]
    DanglingWorkflowRef { role: RoleId, workflow: WorkflowId },
    #[error("role `{role}` requires no authentication method")]
    EmptyRequiredAuth { role: RoleId },
    #[error("exclusion `{exclusion}` references missing workflow `{workflow}`")]
    DanglingExclusionRef {
        exclusion: String,
        workflow: WorkflowId,
    },
    #[error("exclusion `{exclusion}` needs at least two workflows")]
    ExclusionTooSmall { exclusion: String },
    #[error("user `{user}` is not a member of any role")]
    UserWithoutRoles { user: UserId },
    #[error("user `{user}` references missing role `{role}`")]
    DanglingRoleRef { user: UserId, role: RoleId },
    #[error("user `{user}` is not assigned to an identity provider")]
    MissingIdp { user: UserId },
    #[error("federated name `{name}` is used by more than one user")]
    DuplicateFederatedName { name: String },
    #[error("user `{user}` has an account but no identity record, or the reverse")]
    MissingIdentity { user: UserId },
}

impl Violation {
    /// True for violations that are broken cross-references between objects.
    pub fn is_dangling(&self) -> bool {
        matches!(
            self,
            Violation::DanglingWorkflowRef { .. }
                | Violation::DanglingExclusionRef { .. }
                | Violation::DanglingRoleRef { .. }
        )
    }
}

fn check_id(id: &str, key: &str, out: &mut Vec<Violation>) {
    if !is_identifier(id) {
        out.push(Violation::InvalidIdentifier { id: id.to_string() });
    }
    if id != key {
        out.push(Violation::IdMismatch {
            key: key.to_string(),
            id: id.to_string(),
        });
    }
}

/// Returns every violated invariant; an empty list means the policy is sound.
pub fn validate_policy(policy: &Policy) -> Vec<Violation> {
    let mut out = Vec::new();

    for (key, wf) in &policy.workflows {
        check_id(wf.id.as_str(), key.as_str(), &mut out);
        let unknown = |s: &StateId| Violation::UnknownState {
            workflow: wf.id.clone(),
            state: s.clone(),
        };
        if !wf.states.contains(&wf.start_state) {
            out.push(unknown(&wf.start_state));
        }
        let mut ids = HashSet::new();
        for (i, t) in wf.transitions.iter().enumerate() {
            for s in [&t.from, &t.to] {
                if !wf.states.contains(s) {
                    out.push(unknown(s));
                }
            }
            if !ids.insert(t.id) {
                out.push(Violation::DuplicateTransitionId {
                    workflow: wf.id.clone(),
                    transition: t.id,
                });
            }
            let dup = wf.transitions[..i].iter().any(|e| {
                e.from == t.from && e.to == t.to && e.page == t.page && e.params == t.params
            });
            if dup {
                out.push(Violation::DuplicateTransition {
                    workflow: wf.id.clone(),
                    transition: t.id,
                });
            }
            for (name, rule) in &t.params {
                let message = if name.is_empty() {
                    Some("empty parameter name".to_string())
                } else {
                    rule.check().err().map(|e| e.to_string())
                };
                if let Some(message) = message {
                    out.push(Violation::InvalidRule {
                        workflow: wf.id.clone(),
                        transition: t.id,
                        param: name.clone(),
                        message,
                    });
                }
            }
        }
        if !wf
            .transitions_from(&wf.start_state)
            .any(|t| t.page == wf.start_page)
        {
            out.push(Violation::StartPageMismatch {
                workflow: wf.id.clone(),
            });
        }
    }

    let mut referenced: BTreeSet<&WorkflowId> = BTreeSet::new();
    for (key, role) in &policy.roles {
        check_id(role.id.as_str(), key.as_str(), &mut out);
        if role.required_auth.is_empty() {
            out.push(Violation::EmptyRequiredAuth {
                role: role.id.clone(),
            });
        }
        for w in &role.workflow_ids {
            if policy.workflows.contains_key(w) {
                referenced.insert(w);
            } else {
                out.push(Violation::DanglingWorkflowRef {
                    role: role.id.clone(),
                    workflow: w.clone(),
                });
            }
        }
    }
    for id in policy.workflows.keys() {
        if !referenced.contains(id) {
            out.push(Violation::UnreachableWorkflow {
                workflow: id.clone(),
            });
        }
    }

    for (key, ex) in &policy.exclusions {
        check_id(ex.id.as_str(), key.as_str(), &mut out);
        if ex.workflow_ids.len() < 2 {
            out.push(Violation::ExclusionTooSmall {
                exclusion: ex.id.to_string(),
            });
        }
        for w in &ex.workflow_ids {
            if !policy.workflows.contains_key(w) {
                out.push(Violation::DanglingExclusionRef {
                    exclusion: ex.id.to_string(),
                    workflow: w.clone(),
                });
            }
        }
    }

    let mut names = HashSet::new();
    for (key, acct) in &policy.accounts {
        check_id(acct.id.as_str(), key.as_str(), &mut out);
        if acct.role_ids.is_empty() {
            out.push(Violation::UserWithoutRoles {
                user: acct.id.clone(),
            });
        }
        for r in &acct.role_ids {
            if !policy.roles.contains_key(r) {
                out.push(Violation::DanglingRoleRef {
                    user: acct.id.clone(),
                    role: r.clone(),
                });
            }
        }
        if acct.idp_id.trim().is_empty() {
            out.push(Violation::MissingIdp {
                user: acct.id.clone(),
            });
        }
        if !names.insert(acct.federated_name.as_str()) || acct.federated_name.is_empty() {
            out.push(Violation::DuplicateFederatedName {
                name: acct.federated_name.clone(),
            });
        }
    }
    out
}

/// [`validate_policy`] plus pairing of accounts with identity records.
pub fn validate_db(db: &GateDb) -> Vec<Violation> {
    let mut out = validate_policy(&db.policy);
    let accounts: BTreeSet<&UserId> = db.policy.accounts.keys().collect();
    let identities: BTreeSet<&UserId> = db.identities.keys().collect();
    for u in accounts.symmetric_difference(&identities) {
        out.push(Violation::MissingIdentity { user: (*u).clone() });
    }
    for (key, ident) in &db.identities {
        if ident.user_id != *key {
            out.push(Violation::IdMismatch {
                key: key.to_string(),
                id: ident.user_id.to_string(),
            });
        }
        if let Some(acct) = db.policy.accounts.get(key) {
            if acct.federated_name != ident.federated_name {
                out.push(Violation::MissingIdentity { user: key.clone() });
            }
        }
    }
    out
}
