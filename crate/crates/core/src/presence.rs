//! Client presence: beacons from the injected page script, the derived
//! Green/Red/Expired status, and the sweep that ends stale sessions.
//!
//! The token only matters for sessions that authenticated with it; a
//! password-only session is never ended or shown Red for lacking a token.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::AuthMethod;
use crate::session::{PresenceStatus, Session, SessionId, Termination, TerminationReason};
use crate::store::{AuditDecision, AuditEvent, AuditLog, SessionStore};

/// All durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresenceConfig {
    /// How often the client script posts a beacon and the sweeper runs.
    pub period: i64,
    pub activity_window: i64,
    pub inactivity_timeout: i64,
    pub token_grace: i64,
    pub beacon_timeout: i64,
    /// How long terminated sessions stay listed before they are dropped.
    pub terminated_retention: i64,
}

impl Default for PresenceConfig {
    fn default() -> Self {
        PresenceConfig {
            period: 10,
            activity_window: 30,
            inactivity_timeout: 300,
            token_grace: 30,
            beacon_timeout: 35,
            terminated_retention: 3600,
        }
    }
}

fn token_required(s: &Session) -> bool {
    s.methods.contains(&AuthMethod::Token)
}

pub fn status(s: &Session, now: i64, cfg: &PresenceConfig) -> PresenceStatus {
    let p = &s.presence;
    if now - p.last_beacon_at > cfg.beacon_timeout {
        return PresenceStatus::Expired;
    }
    let token_ok = p.token_present || !token_required(s);
    if token_ok && now - p.last_activity_at <= cfg.activity_window {
        PresenceStatus::Green
    } else {
        PresenceStatus::Red
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("session is terminated")]
pub struct SessionTerminated;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heartbeat {
    pub status: PresenceStatus,
    /// The previously reported status, when it differs from `status`.
    pub changed_from: Option<PresenceStatus>,
}

pub fn heartbeat(
    s: &mut Session,
    user_active: bool,
    token_present: bool,
    now: i64,
    cfg: &PresenceConfig,
) -> Result<Heartbeat, SessionTerminated> {
    if s.is_terminated() {
        return Err(SessionTerminated);
    }
    let p = &mut s.presence;
    p.last_beacon_at = now;
    if user_active {
        p.last_activity_at = now;
    }
    p.token_present = token_present;
    if token_present {
        p.token_absent_since = None;
    } else if p.token_absent_since.is_none() {
        p.token_absent_since = Some(now);
    }
    let st = status(s, now, cfg);
    let changed_from = (s.presence.reported != st).then_some(s.presence.reported);
    s.presence.reported = st;
    Ok(Heartbeat {
        status: st,
        changed_from,
    })
}

/// A request through the gateway counts as user activity.
pub fn record_activity(s: &mut Session, now: i64) {
    s.presence.last_activity_at = s.presence.last_activity_at.max(now);
}

/// Why `s` should end now, if it should.
pub fn termination_due(s: &Session, now: i64, cfg: &PresenceConfig) -> Option<TerminationReason> {
    if s.is_terminated() {
        return None;
    }
    let p = &s.presence;
    if token_required(s)
        && p.token_absent_since
            .is_some_and(|t| now - t > cfg.token_grace)
    {
        Some(TerminationReason::TokenAbsent)
    } else if now - p.last_beacon_at > cfg.beacon_timeout {
        Some(TerminationReason::BeaconLost)
    } else if now - p.last_activity_at > cfg.inactivity_timeout {
        Some(TerminationReason::Inactivity)
    } else {
        None
    }
}

/// Marks the session terminated. False if it already was.
pub fn terminate(s: &mut Session, reason: TerminationReason, now: i64) -> bool {
    if s.is_terminated() {
        return false;
    }
    s.terminated = Some(Termination { reason, at: now });
    true
}

pub fn termination_event(s: &Session, reason: TerminationReason, now: i64) -> AuditEvent {
    AuditEvent::new(now, AuditDecision::Terminated, "session")
        .user(s.user_id.as_str())
        .session(s.id.prefix())
        .reason(reason.as_str())
}

fn status_event(s: &Session, from: PresenceStatus, to: PresenceStatus, now: i64) -> AuditEvent {
    AuditEvent::new(now, AuditDecision::PresenceChanged, "presence")
        .user(s.user_id.as_str())
        .session(s.id.prefix())
        .reason(format!("{}->{}", from.as_str(), to.as_str()))
}

/// Audits the presence change a heartbeat reported, if any.
pub fn heartbeat_event(s: &Session, hb: &Heartbeat, now: i64) -> Option<AuditEvent> {
    hb.changed_from
        .map(|from| status_event(s, from, hb.status, now))
}

/// One pass over all sessions: record status changes, terminate stale
/// sessions, drop long-terminated ones. Sessions busy under another lease
/// are left for the next pass. Running it twice at the same instant
/// terminates nothing new.
pub async fn sweep(
    store: &SessionStore,
    audit: &AuditLog,
    now: i64,
    cfg: &PresenceConfig,
) -> Vec<(SessionId, TerminationReason)> {
    let mut ended = Vec::new();
    for id in store.ids() {
        let Ok(mut s) = store.lease(&id, Duration::from_millis(50)).await else {
            continue;
        };
        if let Some(t) = s.terminated {
            if now - t.at > cfg.terminated_retention {
                drop(s);
                store.remove(&id);
            }
            continue;
        }
        let st = status(&s, now, cfg);
        if st != s.presence.reported {
            audit.append(status_event(&s, s.presence.reported, st, now));
            s.presence.reported = st;
        }
        if let Some(reason) = termination_due(&s, now, cfg) {
            terminate(&mut s, reason, now);
            audit.append(termination_event(&s, reason, now));
            ended.push((id, reason));
        }
        s.commit();
    }
    ended
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn session(methods: &[AuthMethod]) -> Session {
        Session::new(
            SessionId::random(),
            "alice".into(),
            methods.iter().copied().collect::<BTreeSet<_>>(),
            0,
            0,
        )
    }

    const BOTH: [AuthMethod; 2] = [AuthMethod::Password, AuthMethod::Token];

    #[test]
    fn heartbeat_status() {
        let cfg = PresenceConfig::default();
        let mut s = session(&BOTH);
        assert_eq!(
            heartbeat(&mut s, true, true, 1, &cfg).unwrap().status,
            PresenceStatus::Green
        );
        // idle, but active 5 s ago with a 30 s window
        let hb = heartbeat(&mut s, false, true, 6, &cfg).unwrap();
        assert_eq!((hb.status, hb.changed_from), (PresenceStatus::Green, None));
        let hb = heartbeat(&mut s, true, false, 7, &cfg).unwrap();
        assert_eq!(
            (hb.status, hb.changed_from),
            (PresenceStatus::Red, Some(PresenceStatus::Green))
        );
        assert_eq!(s.presence.token_absent_since, Some(7));
        heartbeat(&mut s, true, false, 8, &cfg).unwrap();
        assert_eq!(s.presence.token_absent_since, Some(7));
        heartbeat(&mut s, false, true, 9, &cfg).unwrap();
        assert_eq!(s.presence.token_absent_since, None);
        assert_eq!(status(&s, 9 + 31, &cfg), PresenceStatus::Red);
        assert_eq!(status(&s, 9 + 36, &cfg), PresenceStatus::Expired);

        terminate(&mut s, TerminationReason::Logout, 10);
        assert_eq!(
            heartbeat(&mut s, true, true, 11, &cfg),
            Err(SessionTerminated)
        );
    }

    #[test]
    fn password_sessions_ignore_the_token() {
        let cfg = PresenceConfig::default();
        let mut s = session(&[AuthMethod::Password]);
        assert_eq!(
            heartbeat(&mut s, true, false, 1, &cfg).unwrap().status,
            PresenceStatus::Green
        );
        assert_eq!(termination_due(&s, 1 + cfg.token_grace + 1, &cfg), None);
    }

    #[test]
    fn thresholds() {
        let cfg = PresenceConfig::default();
        let mut s = session(&BOTH);
        heartbeat(&mut s, true, true, 0, &cfg).unwrap();
        // keep beacons fresh but report no activity
        let idle_end = cfg.inactivity_timeout;
        for t in (10..=idle_end + 1).step_by(10) {
            heartbeat(&mut s, false, true, t, &cfg).unwrap();
        }
        assert_eq!(termination_due(&s, idle_end, &cfg), None);
        assert_eq!(
            termination_due(&s, idle_end + 1, &cfg),
            Some(TerminationReason::Inactivity)
        );

        let mut s = session(&BOTH);
        heartbeat(&mut s, true, true, 100, &cfg).unwrap();
        assert_eq!(termination_due(&s, 100 + cfg.beacon_timeout, &cfg), None);
        assert_eq!(
            termination_due(&s, 100 + cfg.beacon_timeout + 1, &cfg),
            Some(TerminationReason::BeaconLost)
        );

        let mut s = session(&BOTH);
        heartbeat(&mut s, true, false, 100, &cfg).unwrap();
        heartbeat(&mut s, true, false, 100 + cfg.token_grace, &cfg).unwrap();
        assert_eq!(termination_due(&s, 100 + cfg.token_grace, &cfg), None);
        heartbeat(&mut s, true, false, 100 + cfg.token_grace + 1, &cfg).unwrap();
        assert_eq!(
            termination_due(&s, 100 + cfg.token_grace + 1, &cfg),
            Some(TerminationReason::TokenAbsent)
        );
    }

    #[tokio::test]
    async fn sweep_terminates_once_and_audits() {
        let cfg = PresenceConfig::default();
        let store = SessionStore::new();
        let audit = AuditLog::in_memory();
        let mut fresh = session(&BOTH);
        let stale = session(&BOTH);
        let stale_id = stale.id;
        heartbeat(&mut fresh, true, true, 40, &cfg).unwrap();
        store.insert(fresh);
        store.insert(stale);

        let ended = sweep(&store, &audit, 40, &cfg).await;
        assert_eq!(ended, vec![(stale_id, TerminationReason::BeaconLost)]);
        assert!(sweep(&store, &audit, 40, &cfg).await.is_empty());
        let decisions: Vec<_> = audit.tail(10).iter().map(|r| r.decision).collect();
        assert_eq!(
            decisions,
            vec![AuditDecision::PresenceChanged, AuditDecision::Terminated]
        );
        assert_eq!(audit.tail(1)[0].reason, "beacon_lost");

        // terminated sessions are dropped after the retention period
        sweep(&store, &audit, 40 + cfg.terminated_retention + 1, &cfg).await;
        assert!(!store.contains(&stale_id));
    }
}
