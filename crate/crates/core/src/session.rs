//! Per-login runtime state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::model::{AuthMethod, StateId, UserId, WorkflowId};

/// 128-bit random session identifier, rendered as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SessionId([u8; 16]);

impl SessionId {
    pub fn random() -> Self {
        let mut b = [0u8; 16];
        rand::rng().fill_bytes(&mut b);
        SessionId(b)
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        SessionId(b)
    }

    /// First 8 hex characters; the only form that may appear in logs.
    pub fn prefix(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({}…)", self.prefix())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed session id")]
pub struct BadSessionId;

impl FromStr for SessionId {
    type Err = BadSessionId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 {
            return Err(BadSessionId);
        }
        let v = hex::decode(s).map_err(|_| BadSessionId)?;
        let mut b = [0u8; 16];
        b.copy_from_slice(&v);
        Ok(SessionId(b))
    }
}

impl TryFrom<String> for SessionId {
    type Error = BadSessionId;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<SessionId> for String {
    fn from(id: SessionId) -> Self {
        id.to_string()
    }
}

/// A running copy of one workflow, tracking every state it may be in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowInstance {
    pub workflow_id: WorkflowId,
    pub current: BTreeSet<StateId>,
    pub active: bool,
    pub started_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresenceStatus {
    Green,
    Red,
    Expired,
}

impl PresenceStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PresenceStatus::Green => "green",
            PresenceStatus::Red => "red",
            PresenceStatus::Expired => "expired",
        }
    }
}

/// Client presence as last reported by the injected beacon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceRecord {
    pub last_beacon_at: i64,
    pub last_activity_at: i64,
    pub token_present: bool,
    /// Start of the current run of token-absent beacons.
    pub token_absent_since: Option<i64>,
    /// Last status written to the audit log.
    pub reported: PresenceStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Inactivity,
    TokenAbsent,
    BeaconLost,
    AdminAction,
    Logout,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::Inactivity => "inactivity",
            TerminationReason::TokenAbsent => "token_absent",
            TerminationReason::BeaconLost => "beacon_lost",
            TerminationReason::AdminAction => "admin_action",
            TerminationReason::Logout => "logout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Termination {
    pub reason: TerminationReason,
    pub at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub user_id: UserId,
    pub methods: BTreeSet<AuthMethod>,
    pub created_at: i64,
    pub assertion_issued_at: i64,
    pub instances: Vec<WorkflowInstance>,
    /// Every workflow ever instantiated in this session.
    pub touched: BTreeSet<WorkflowId>,
    pub presence: PresenceRecord,
    /// Host-application cookies, held server-side.
    pub upstream_cookies: BTreeMap<String, String>,
    pub terminated: Option<Termination>,
}

impl Session {
    pub fn new(
        id: SessionId,
        user_id: UserId,
        methods: BTreeSet<AuthMethod>,
        assertion_issued_at: i64,
        now: i64,
    ) -> Self {
        let token_present = methods.contains(&AuthMethod::Token);
        Session {
            id,
            user_id,
            methods,
            created_at: now,
            assertion_issued_at,
            instances: Vec::new(),
            touched: BTreeSet::new(),
            presence: PresenceRecord {
                last_beacon_at: now,
                last_activity_at: now,
                token_present,
                token_absent_since: None,
                reported: PresenceStatus::Green,
            },
            upstream_cookies: BTreeMap::new(),
            terminated: None,
        }
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated.is_some()
    }

    pub fn instance(&self, workflow: &WorkflowId) -> Option<&WorkflowInstance> {
        self.instances.iter().find(|i| &i.workflow_id == workflow)
    }

    pub fn active_instances(&self) -> impl Iterator<Item = &WorkflowInstance> {
        self.instances.iter().filter(|i| i.active)
    }

    /// Canonical serialized form, used for byte-equality comparisons.
    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("session serializes")
    }

    /// The `Cookie` header value for the host application, if any.
    pub fn upstream_cookie_header(&self) -> Option<String> {
        if self.upstream_cookies.is_empty() {
            return None;
        }
        Some(
            self.upstream_cookies
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join("; "),
        )
    }
}
