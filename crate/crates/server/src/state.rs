//! Shared gateway state.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use gate_core::clock::{Clock, SystemClock};
use gate_core::federation::{ResumeTable, SpVerifier};
use gate_core::rule::HostState;
use gate_core::store::oracle::{TableSnapshot, TsvDirectory};
use gate_core::store::{AuditEvent, AuditLog, PolicyStore, SessionStore};
use gate_core::training::RecordingBook;

use crate::config::GatewayConfig;

pub const LEASE_TIMEOUT: Duration = Duration::from_secs(5);

pub struct Gateway {
    pub config: GatewayConfig,
    pub policy: Arc<PolicyStore>,
    pub sessions: SessionStore,
    pub audit: AuditLog,
    pub recordings: Mutex<RecordingBook>,
    pub verifier: SpVerifier,
    pub resume: ResumeTable,
    pub oracle: Arc<dyn HostState>,
    pub clock: Arc<dyn Clock>,
    pub http: reqwest::Client,
    pub admin_token: Option<String>,
    monitor_decisions: AtomicU64,
}

/// Optional overrides for [`Gateway::new`], mostly for tests.
#[derive(Default)]
pub struct Overrides {
    pub clock: Option<Arc<dyn Clock>>,
    pub oracle: Option<Arc<dyn HostState>>,
    pub policy: Option<Arc<PolicyStore>>,
    pub admin_token: Option<String>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, o: Overrides) -> anyhow::Result<Arc<Gateway>> {
        config.check()?;
        let policy = match (o.policy, &config.data_dir) {
            (Some(p), _) => p,
            (None, Some(dir)) => {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                Arc::new(PolicyStore::open(&dir.join("gatedb.xml"))?)
            }
            (None, None) => Arc::new(PolicyStore::in_memory(Default::default())?),
        };
        let audit = match &config.data_dir {
            Some(dir) => AuditLog::open(&dir.join("audit.jrnl"))?,
            None => AuditLog::in_memory(),
        };
        let oracle: Arc<dyn HostState> = match (o.oracle, &config.oracle_dir) {
            (Some(o), _) => o,
            (None, Some(dir)) => Arc::new(TsvDirectory::new(dir)),
            (None, None) => Arc::new(TableSnapshot::default()),
        };
        let http = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(Duration::from_secs(30))
            .build()?;
        let admin_token = o
            .admin_token
            .or_else(|| std::env::var("GATE_ADMIN_TOKEN").ok())
            .or_else(|| config.admin_token.clone())
            .filter(|t| !t.is_empty());
        Ok(Arc::new(Gateway {
            verifier: SpVerifier::new(&config.sp_id, &config.idp.idp_id, config.key()?),
            resume: ResumeTable::new(config.resume_ttl),
            config,
            policy,
            sessions: SessionStore::new(),
            audit,
            recordings: Mutex::new(RecordingBook::default()),
            oracle,
            clock: o.clock.unwrap_or_else(|| Arc::new(SystemClock)),
            http,
            admin_token,
            monitor_decisions: AtomicU64::new(0),
        }))
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    pub fn record(&self, ev: AuditEvent) -> u64 {
        let (seq, err) = self.audit.append(ev);
        if let Some(e) = err {
            tracing::error!(error = %e, "audit journal write failed");
        }
        seq
    }

    pub(crate) fn count_decision(&self) {
        self.monitor_decisions.fetch_add(1, Ordering::Relaxed);
    }

    /// How many times the reference monitor has been consulted.
    pub fn monitor_decisions(&self) -> u64 {
        self.monitor_decisions.load(Ordering::Relaxed)
    }
}
