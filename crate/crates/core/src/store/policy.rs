//! The access-control database (policy) and the identity database,
//! updated together in validated transactions.
//!
//! The gateway only ever holds the [`Policy`] snapshot; password hashes and
//! token bindings are reachable through [`IdentityDb`], which is handed to
//! the identity provider alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use crate::model::{GateDb, IdentityRecord, Policy, UserId};
use crate::training::xml::{export_xml, import_xml, ImportError};
use crate::validate::{validate_db, Violation};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    Conflict(String),
    #[error("validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Violation>),
    #[error("{0}")]
    Rejected(String),
    #[error("storage error: {0}")]
    Io(String),
    #[error(transparent)]
    Import(#[from] ImportError),
}

type Records = BTreeMap<UserId, IdentityRecord>;

/// Read access to identity records.
#[derive(Debug, Default)]
pub struct IdentityDb {
    records: RwLock<Arc<Records>>,
}

impl IdentityDb {
    pub fn get(&self, user: &UserId) -> Option<IdentityRecord> {
        self.snapshot().get(user).cloned()
    }

    pub fn by_federated_name(&self, name: &str) -> Option<IdentityRecord> {
        self.snapshot()
            .values()
            .find(|r| r.federated_name == name)
            .cloned()
    }

    fn snapshot(&self) -> Arc<Records> {
        self.records.read().expect("idb lock").clone()
    }

    fn replace(&self, records: Records) {
        *self.records.write().expect("idb lock") = Arc::new(records);
    }
}

#[derive(Debug)]
pub struct PolicyStore {
    policy: RwLock<Arc<Policy>>,
    idb: Arc<IdentityDb>,
    writer: Mutex<()>,
    path: Option<PathBuf>,
}

impl PolicyStore {
    /// An in-memory store. `db` must validate.
    pub fn in_memory(db: GateDb) -> Result<Self, StoreError> {
        Self::build(db, None)
    }

    /// Loads the XML document at `path`, or starts empty if the file does
    /// not exist yet. Every commit rewrites the file atomically.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let db = match fs::read(path) {
            Ok(bytes) => import_xml(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => GateDb::default(),
            Err(e) => return Err(StoreError::Io(format!("{}: {e}", path.display()))),
        };
        Self::build(db, Some(path.to_path_buf()))
    }

    fn build(db: GateDb, path: Option<PathBuf>) -> Result<Self, StoreError> {
        let violations = validate_db(&db);
        if !violations.is_empty() {
            return Err(StoreError::ValidationFailed(violations));
        }
        Ok(PolicyStore {
            policy: RwLock::new(Arc::new(db.policy)),
            idb: Arc::new(IdentityDb {
                records: RwLock::new(Arc::new(db.identities)),
            }),
            writer: Mutex::new(()),
            path,
        })
    }

    /// Current policy snapshot. Later commits do not affect it.
    pub fn policy(&self) -> Arc<Policy> {
        self.policy.read().expect("policy lock").clone()
    }

    pub fn identities(&self) -> Arc<IdentityDb> {
        self.idb.clone()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn current(&self) -> GateDb {
        GateDb {
            policy: (*self.policy()).clone(),
            identities: (*self.idb.snapshot()).clone(),
        }
    }

    /// Runs `f` on a copy of both databases. The copy replaces the stored
    /// state only if `f` succeeds and the result validates; otherwise
    /// nothing changes.
    pub fn transact<T>(
        &self,
        f: impl FnOnce(&mut GateDb) -> Result<T, StoreError>,
    ) -> Result<T, StoreError> {
        let _w = self.writer.lock().expect("writer lock");
        let mut db = self.current();
        let out = f(&mut db)?;
        let violations = validate_db(&db);
        if !violations.is_empty() {
            return Err(StoreError::ValidationFailed(violations));
        }
        if let Some(path) = &self.path {
            write_atomically(path, &export_xml(&db))?;
        }
        *self.policy.write().expect("policy lock") = Arc::new(db.policy);
        self.idb.replace(db.identities);
        Ok(out)
    }

    /// The whole database as an XML document.
    pub fn export(&self) -> Vec<u8> {
        let _w = self.writer.lock().expect("writer lock");
        export_xml(&self.current())
    }

    /// Replaces everything with the document's contents, or nothing.
    pub fn import(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let incoming = import_xml(bytes)?;
        self.transact(|db| {
            *db = incoming;
            Ok(())
        })
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io = |e: std::io::Error| StoreError::Io(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}
