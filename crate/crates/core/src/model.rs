//! The access-control data model: workflows, roles, exclusion sets and user
//! bindings.
//!
//! The model is split along the trust boundary between the gateway and the
//! identity provider. [`Policy`] holds everything the gateway needs
//! (workflows, roles, exclusions and [`Account`]s) and never carries
//! credential material. [`IdentityRecord`]s hold the password hash and token
//! binding and live only on the identity-provider side. [`User`] is the
//! joined view used by import/export and the administrative surface.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::credentials::PasswordHash;
use crate::page::PageId;
use crate::rule::ParamRule;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

id_type!(WorkflowId);
id_type!(StateId);
id_type!(RoleId);
id_type!(UserId);
id_type!(ExclusionId);

/// Identifiers for policy objects: 1 to 128 characters from `[A-Za-z0-9_.:-]`.
pub fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b':' | b'-'))
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_sql_identifier(s: &str) -> bool {
    let mut bytes = s.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_alphabetic() || b == b'_' => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthMethod {
    Password,
    Token,
}

impl AuthMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AuthMethod::Password => "password",
            AuthMethod::Token => "token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "password" => Some(AuthMethod::Password),
            "token" => Some(AuthMethod::Token),
            _ => None,
        }
    }
}

impl fmt::Display for AuthMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parameter-guarded edge of a workflow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub id: u32,
    pub from: StateId,
    pub to: StateId,
    pub page: PageId,
    #[serde(default)]
    pub params: BTreeMap<String, ParamRule>,
}

impl Transition {
    fn label_eq(&self, other: &Transition) -> bool {
        self.from == other.from
            && self.to == other.to
            && self.page == other.page
            && self.params == other.params
    }
}

/// A finite state machine over pages. The unit of explicit access right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workflow {
    pub id: WorkflowId,
    pub name: String,
    pub states: BTreeSet<StateId>,
    pub start_state: StateId,
    pub start_page: PageId,
    pub transitions: Vec<Transition>,
}

impl Workflow {
    pub fn transitions_from<'a>(
        &'a self,
        state: &'a StateId,
    ) -> impl Iterator<Item = &'a Transition> + 'a {
        self.transitions.iter().filter(move |t| &t.from == state)
    }

    pub fn transition(&self, id: u32) -> Option<&Transition> {
        self.transitions.iter().find(|t| t.id == id)
    }

    pub fn transition_mut(&mut self, id: u32) -> Option<&mut Transition> {
        self.transitions.iter_mut().find(|t| t.id == id)
    }

    /// Drops transitions identical in source, target, page and parameter
    /// rules to an earlier one, keeping the first occurrence.
    pub fn dedup_transitions(&mut self) {
        let mut kept: Vec<Transition> = Vec::with_capacity(self.transitions.len());
        for t in self.transitions.drain(..) {
            if !kept.iter().any(|k| k.label_eq(&t)) {
                kept.push(t);
            }
        }
        self.transitions = kept;
    }

    /// The page of the first transition entering `state`, if any.
    pub fn entry_page(&self, state: &StateId) -> Option<&PageId> {
        self.transitions
            .iter()
            .find(|t| &t.to == state)
            .map(|t| &t.page)
    }
}

/// A collection of allowed workflows together with the authentication
/// methods a user acting in the role must have presented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub id: RoleId,
    pub name: String,
    #[serde(default)]
    pub workflow_ids: BTreeSet<WorkflowId>,
    pub required_auth: BTreeSet<AuthMethod>,
}

/// Workflows that must not be combined within one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionSet {
    pub id: ExclusionId,
    pub workflow_ids: BTreeSet<WorkflowId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBinding {
    pub firm_code: String,
    pub user_code: String,
}

/// Login for the host application, injected by the gateway on session start.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpstreamCredentials {
    pub username: String,
    pub secret: String,
}

impl fmt::Debug for UpstreamCredentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UpstreamCredentials")
            .field("username", &self.username)
            .field("secret", &"<redacted>")
            .finish()
    }
}

/// Gateway-side view of a user. Carries no credential material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub id: UserId,
    pub federated_name: String,
    pub role_ids: BTreeSet<RoleId>,
    pub idp_id: String,
    #[serde(default)]
    pub upstream: Option<UpstreamCredentials>,
}

/// Identity-provider-side record authenticating one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub user_id: UserId,
    pub federated_name: String,
    pub password: PasswordHash,
    #[serde(default)]
    pub token: Option<TokenBinding>,
}

/// The complete user record, as edited by administrators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct User {
    pub id: UserId,
    pub federated_name: String,
    pub role_ids: BTreeSet<RoleId>,
    pub idp_id: String,
    pub password: PasswordHash,
    pub token_binding: Option<TokenBinding>,
    pub upstream_credentials: Option<UpstreamCredentials>,
}

impl User {
    pub fn split(self) -> (Account, IdentityRecord) {
        (
            Account {
                id: self.id.clone(),
                federated_name: self.federated_name.clone(),
                role_ids: self.role_ids,
                idp_id: self.idp_id,
                upstream: self.upstream_credentials,
            },
            IdentityRecord {
                user_id: self.id,
                federated_name: self.federated_name,
                password: self.password,
                token: self.token_binding,
            },
        )
    }

    pub fn join(account: Account, identity: IdentityRecord) -> Self {
        User {
            id: account.id,
            federated_name: account.federated_name,
            role_ids: account.role_ids,
            idp_id: account.idp_id,
            password: identity.password,
            token_binding: identity.token,
            upstream_credentials: account.upstream,
        }
    }
}

/// Everything the reference monitor consults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    #[serde(default)]
    pub workflows: BTreeMap<WorkflowId, Workflow>,
    #[serde(default)]
    pub roles: BTreeMap<RoleId, Role>,
    #[serde(default)]
    pub exclusions: BTreeMap<ExclusionId, ExclusionSet>,
    #[serde(default)]
    pub accounts: BTreeMap<UserId, Account>,
}

impl Policy {
    pub fn account_by_federated_name(&self, name: &str) -> Option<&Account> {
        self.accounts.values().find(|a| a.federated_name == name)
    }
}

/// The full database produced by training: policy plus identity records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GateDb {
    pub policy: Policy,
    pub identities: BTreeMap<UserId, IdentityRecord>,
}

impl GateDb {
    /// Users whose account and identity record both exist, in id order.
    pub fn users(&self) -> impl Iterator<Item = User> + '_ {
        self.policy.accounts.values().filter_map(|a| {
            self.identities
                .get(&a.id)
                .map(|i| User::join(a.clone(), i.clone()))
        })
    }

    pub fn upsert_user(&mut self, user: User) {
        let (account, identity) = user.split();
        self.identities.insert(identity.user_id.clone(), identity);
        self.policy.accounts.insert(account.id.clone(), account);
    }

    pub fn remove_user(&mut self, id: &UserId) -> bool {
        let a = self.policy.accounts.remove(id).is_some();
        let i = self.identities.remove(id).is_some();
        a || i
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown role `{0}`")]
    UnknownRole(RoleId),
    #[error("unknown user `{0}`")]
    UnknownUser(UserId),
}

fn roles_of<'a>(
    account: &'a Account,
    policy: &'a Policy,
) -> impl Iterator<Item = Result<&'a Role, ModelError>> + 'a {
    account.role_ids.iter().map(move |rid| {
        policy
            .roles
            .get(rid)
            .ok_or_else(|| ModelError::UnknownRole(rid.clone()))
    })
}

/// Union of the workflow sets of the account's roles.
pub fn allowed_workflows(
    account: &Account,
    policy: &Policy,
) -> Result<BTreeSet<WorkflowId>, ModelError> {
    let mut out = BTreeSet::new();
    for role in roles_of(account, policy) {
        out.extend(role?.workflow_ids.iter().cloned());
    }
    Ok(out)
}

/// Union of the authentication methods required by the account's roles.
pub fn required_auth_methods(
    account: &Account,
    policy: &Policy,
) -> Result<BTreeSet<AuthMethod>, ModelError> {
    let mut out = BTreeSet::new();
    for role in roles_of(account, policy) {
        out.extend(role?.required_auth.iter().copied());
    }
    Ok(out)
}
