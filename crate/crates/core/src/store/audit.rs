//! Append-only audit trail. Parameter values are never stored, only a
//! digest of them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::journal::{Journal, JournalError};
use crate::rule::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuditDecision {
    Allow,
    Deny,
    Login,
    Logout,
    Terminated,
    SsoIssued,
    SsoRejected,
    /// A trainer's request passed through unchecked and was recorded.
    Trained,
    /// A session's presence status changed between Green and Red.
    PresenceChanged,
}

impl AuditDecision {
    pub const ALL: [AuditDecision; 9] = [
        AuditDecision::Allow,
        AuditDecision::Deny,
        AuditDecision::Login,
        AuditDecision::Logout,
        AuditDecision::Terminated,
        AuditDecision::SsoIssued,
        AuditDecision::SsoRejected,
        AuditDecision::Trained,
        AuditDecision::PresenceChanged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditDecision::Allow => "Allow",
            AuditDecision::Deny => "Deny",
            AuditDecision::Login => "Login",
            AuditDecision::Logout => "Logout",
            AuditDecision::Terminated => "Terminated",
            AuditDecision::SsoIssued => "SsoIssued",
            AuditDecision::SsoRejected => "SsoRejected",
            AuditDecision::Trained => "Trained",
            AuditDecision::PresenceChanged => "PresenceChanged",
        }
    }
}

impl fmt::Display for AuditDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AuditDecision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AuditDecision::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown decision `{s}`"))
    }
}

pub const NO_USER: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub at: i64,
    /// User id, or `-` when the request carried no identity.
    pub user: String,
    /// First 8 hex characters of the session id, or `-`.
    pub session_prefix: String,
    /// The page, or an event tag such as `sso` or `presence`.
    pub page: String,
    pub decision: AuditDecision,
    pub reason: String,
    #[serde(with = "crate::credentials::hex_bytes")]
    pub params_digest: Vec<u8>,
}

/// A record before the log assigns its sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub at: i64,
    pub user: String,
    pub session_prefix: String,
    pub page: String,
    pub decision: AuditDecision,
    pub reason: String,
    pub params_digest: Vec<u8>,
}

impl AuditEvent {
    pub fn new(at: i64, decision: AuditDecision, page: impl Into<String>) -> Self {
        AuditEvent {
            at,
            user: NO_USER.to_string(),
            session_prefix: NO_USER.to_string(),
            page: page.into(),
            decision,
            reason: String::new(),
            params_digest: params_digest(&Params::new()).to_vec(),
        }
    }

    pub fn user(mut self, user: impl Into<String>) -> Self {
        self.user = user.into();
        self
    }

    pub fn session(mut self, prefix: impl Into<String>) -> Self {
        self.session_prefix = prefix.into();
        self
    }

    pub fn reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = reason.into();
        self
    }

    pub fn params(mut self, params: &Params) -> Self {
        self.params_digest = params_digest(params).to_vec();
        self
    }
}

/// SHA-256 over the sorted `(name, value)` pairs, each string prefixed by
/// its big-endian `u32` byte length.
pub fn params_digest(params: &Params) -> [u8; 32] {
    let mut pairs: Vec<(&str, &str)> = params
        .iter()
        .flat_map(|(k, vs)| vs.iter().map(move |v| (k.as_str(), v.as_str())))
        .collect();
    pairs.sort_unstable();
    let mut h = Sha256::new();
    for (k, v) in pairs {
        for s in [k, v] {
            h.update((s.len() as u32).to_be_bytes());
            h.update(s.as_bytes());
        }
    }
    h.finalize().into()
}

/// Query filter. Bounds are inclusive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFilter {
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub from: Option<i64>,
    #[serde(default)]
    pub to: Option<i64>,
    #[serde(default)]
    pub decision: Option<AuditDecision>,
}

impl AuditFilter {
    pub fn matches(&self, r: &AuditRecord) -> bool {
        self.user.as_ref().is_none_or(|u| &r.user == u)
            && self.from.is_none_or(|f| r.at >= f)
            && self.to.is_none_or(|t| r.at <= t)
            && self.decision.is_none_or(|d| r.decision == d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdleGap {
    pub session_prefix: String,
    pub max_gap: i64,
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("journal record {index} is unreadable: {message}")]
    BadRecord { index: usize, message: String },
}

#[derive(Debug, Default)]
struct Inner {
    records: Vec<AuditRecord>,
    journal: Option<Journal>,
}

/// The log. Appends are serialized; each appended record is written to the
/// journal (when file-backed) before it becomes visible to queries.
#[derive(Debug, Default)]
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        AuditLog::default()
    }

    pub fn open(path: &Path) -> Result<Self, AuditError> {
        let (journal, frames) = Journal::open(path)?;
        let records = frames
            .iter()
            .enumerate()
            .map(|(index, f)| {
                serde_json::from_slice(f).map_err(|e| AuditError::BadRecord {
                    index,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<AuditRecord>, _>>()?;
        Ok(AuditLog {
            inner: Mutex::new(Inner {
                records,
                journal: Some(journal),
            }),
        })
    }

    /// Assigns the next sequence number and stores the record. A journal
    /// write failure is reported, but the record is still kept in memory
    /// so that the audit trail of the running process stays complete.
    pub fn append(&self, ev: AuditEvent) -> (u64, Option<AuditError>) {
        let mut inner = self.inner.lock().expect("audit lock");
        let seq = inner.records.last().map_or(1, |r| r.seq + 1);
        let record = AuditRecord {
            seq,
            at: ev.at,
            user: ev.user,
            session_prefix: ev.session_prefix,
            page: ev.page,
            decision: ev.decision,
            reason: ev.reason,
            params_digest: ev.params_digest,
        };
        let err = inner.journal.as_mut().and_then(|j| {
            let bytes = serde_json::to_vec(&record).expect("audit records serialize");
            j.append(&bytes).err().map(AuditError::from)
        });
        inner.records.push(record);
        (seq, err)
    }

    /// Matching records in sequence order.
    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditRecord> {
        let inner = self.inner.lock().expect("audit lock");
        inner
            .records
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect()
    }

    /// The last `n` records, oldest first.
    pub fn tail(&self, n: usize) -> Vec<AuditRecord> {
        let inner = self.inner.lock().expect("audit lock");
        let start = inner.records.len().saturating_sub(n);
        inner.records[start..].to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("audit lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per session, the longest gap between consecutive Allow records of
    /// `user` with `from <= at <= to`. Sessions come out in prefix order.
    pub fn idle_report(&self, user: &str, from: i64, to: i64) -> Vec<IdleGap> {
        let filter = AuditFilter {
            user: Some(user.to_string()),
            from: Some(from),
            to: Some(to),
            decision: Some(AuditDecision::Allow),
        };
        let mut by_session: BTreeMap<String, Vec<i64>> = BTreeMap::new();
        for r in self.query(&filter) {
            by_session.entry(r.session_prefix).or_default().push(r.at);
        }
        by_session
            .into_iter()
            .map(|(session_prefix, mut times)| {
                times.sort_unstable();
                let max_gap = times.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
                IdleGap {
                    session_prefix,
                    max_gap,
                }
            })
            .collect()
    }
}
