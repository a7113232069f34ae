//! Live sessions and exclusive leases on them.
//!
//! A lease hands out a working copy of the session. Committing writes the
//! copy back; dropping the lease without committing discards it. Leases on
//! the same session queue up behind each other.

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};

use crate::model::UserId;
use crate::session::{Session, SessionId};

pub const DEFAULT_LEASE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LeaseError {
    #[error("unknown session {0:?}")]
    UnknownSession(SessionId),
    #[error("timed out waiting for session {0:?}")]
    LeaseTimeout(SessionId),
}

type Slot = Arc<AsyncMutex<Session>>;

#[derive(Debug, Default)]
pub struct SessionStore {
    slots: Mutex<BTreeMap<SessionId, Slot>>,
}

pub struct SessionLease {
    guard: OwnedMutexGuard<Session>,
    working: Session,
}

impl SessionLease {
    /// Publishes the working copy.
    pub fn commit(mut self) {
        *self.guard = self.working.clone();
    }

    /// Discards the working copy. Equivalent to dropping the lease.
    pub fn rollback(self) {}

    /// The stored state as of lease acquisition.
    pub fn original(&self) -> &Session {
        &self.guard
    }
}

impl Deref for SessionLease {
    type Target = Session;

    fn deref(&self) -> &Session {
        &self.working
    }
}

impl DerefMut for SessionLease {
    fn deref_mut(&mut self) -> &mut Session {
        &mut self.working
    }
}

impl SessionStore {
    pub fn new() -> Self {
        SessionStore::default()
    }

    fn slot(&self, id: &SessionId) -> Option<Slot> {
        self.slots.lock().expect("session map").get(id).cloned()
    }

    pub fn insert(&self, session: Session) {
        let id = session.id;
        self.slots
            .lock()
            .expect("session map")
            .insert(id, Arc::new(AsyncMutex::new(session)));
    }

    /// Forgets a session. A lease still held on it stays usable, but its
    /// commit no longer reaches the store.
    pub fn remove(&self, id: &SessionId) -> bool {
        self.slots.lock().expect("session map").remove(id).is_some()
    }

    pub fn contains(&self, id: &SessionId) -> bool {
        self.slots.lock().expect("session map").contains_key(id)
    }

    pub fn ids(&self) -> Vec<SessionId> {
        self.slots
            .lock()
            .expect("session map")
            .keys()
            .copied()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("session map").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub async fn lease(
        &self,
        id: &SessionId,
        timeout: Duration,
    ) -> Result<SessionLease, LeaseError> {
        let slot = self.slot(id).ok_or(LeaseError::UnknownSession(*id))?;
        let guard = tokio::time::timeout(timeout, slot.lock_owned())
            .await
            .map_err(|_| LeaseError::LeaseTimeout(*id))?;
        let working = guard.clone();
        Ok(SessionLease { guard, working })
    }

    /// Copy of the committed state.
    pub async fn get(&self, id: &SessionId, timeout: Duration) -> Result<Session, LeaseError> {
        self.lease(id, timeout).await.map(|l| l.working)
    }

    /// Committed state of every session, in id order. Sessions whose lease
    /// cannot be had within `timeout` are skipped.
    pub async fn list(&self, timeout: Duration) -> Vec<Session> {
        let slots: Vec<Slot> = self
            .slots
            .lock()
            .expect("session map")
            .values()
            .cloned()
            .collect();
        let mut out = Vec::with_capacity(slots.len());
        for slot in slots {
            if let Ok(guard) = tokio::time::timeout(timeout, slot.lock()).await {
                out.push(guard.clone());
            }
        }
        out
    }

    pub async fn for_user(&self, user: &UserId, timeout: Duration) -> Vec<Session> {
        self.list(timeout)
            .await
            .into_iter()
            .filter(|s| &s.user_id == user)
            .collect()
    }
}
