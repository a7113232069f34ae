use std::collections::BTreeSet;

use gate_core::model::{AuthMethod, UserId};
use gate_core::presence::{heartbeat, sweep, PresenceConfig};
use gate_core::session::{Session, SessionId};
use gate_core::store::{AuditLog, SessionStore};
use proptest::prelude::*;

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .build()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn green_beacons_keep_sessions_alive(period in 1i64..30, ticks in 1usize..400, token in any::<bool>()) {
        let cfg = PresenceConfig { period, ..PresenceConfig::default() };
        prop_assume!(period < cfg.activity_window && period < cfg.beacon_timeout && period < cfg.token_grace);
        let methods = if token {
            BTreeSet::from([AuthMethod::Password, AuthMethod::Token])
        } else {
            BTreeSet::from([AuthMethod::Password])
        };
        let store = SessionStore::new();
        let audit = AuditLog::in_memory();
        let id = SessionId::from_bytes([3; 16]);
        store.insert(Session::new(id, UserId::from("u"), methods, 0, 0));
        runtime().block_on(async {
            for k in 1..=ticks as i64 {
                let now = k * period;
                let mut l = store.lease(&id, std::time::Duration::from_secs(1)).await.unwrap();
                heartbeat(&mut l, true, true, now, &cfg).unwrap();
                l.commit();
                assert!(sweep(&store, &audit, now, &cfg).await.is_empty(), "terminated at {now}");
            }
        });
    }

    #[test]
    fn second_sweep_at_same_instant_ends_nothing(
        sessions in proptest::collection::vec((0i64..400, 0i64..400, any::<bool>(), proptest::option::of(0i64..400)), 1..8),
        now in 0i64..800,
    ) {
        let cfg = PresenceConfig::default();
        let store = SessionStore::new();
        let audit = AuditLog::in_memory();
        for (i, (beacon, activity, token, absent)) in sessions.iter().enumerate() {
            let mut s = Session::new(
                SessionId::from_bytes([i as u8; 16]),
                UserId::from("u"),
                BTreeSet::from([AuthMethod::Password, AuthMethod::Token]),
                0,
                0,
            );
            s.presence.last_beacon_at = *beacon;
            s.presence.last_activity_at = *activity;
            s.presence.token_present = *token;
            s.presence.token_absent_since = *absent;
            store.insert(s);
        }
        let (first, second, records) = runtime().block_on(async {
            let first = sweep(&store, &audit, now, &cfg).await;
            let n = audit.len();
            let second = sweep(&store, &audit, now, &cfg).await;
            (first, second, audit.len() - n)
        });
        prop_assert!(first.len() <= sessions.len());
        prop_assert!(second.is_empty());
        prop_assert_eq!(records, 0);
    }
}
