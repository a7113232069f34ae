//! Persistence: policy and identity databases, session leases, the audit
//! log and host-state oracles.

pub mod audit;
pub mod journal;
pub mod oracle;
pub mod policy;
pub mod sessions;

pub use audit::{params_digest, AuditDecision, AuditEvent, AuditFilter, AuditLog, AuditRecord};
pub use policy::{IdentityDb, PolicyStore, StoreError};
pub use sessions::{LeaseError, SessionLease, SessionStore};
