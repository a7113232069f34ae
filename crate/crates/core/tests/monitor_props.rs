use std::collections::BTreeSet;

use gate_core::fixtures::linear_workflow;
use gate_core::model::{
    Account, AuthMethod, ExclusionSet, Policy, Role, UserId, Workflow, WorkflowId,
};
use gate_core::monitor::{apply_exclusion, evaluate, Decision, MonitorRequest};
use gate_core::page::PageId;
use gate_core::session::{Session, SessionId};
use gate_core::store::oracle::TableSnapshot;
use gate_testkit::{monitor_case, path_exists, single_workflow_verdicts, Table};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

fn policy_with(workflows: Vec<Workflow>) -> Policy {
    let mut p = Policy::default();
    let ids: BTreeSet<WorkflowId> = workflows.iter().map(|w| w.id.clone()).collect();
    for wf in workflows {
        p.workflows.insert(wf.id.clone(), wf);
    }
    p.roles.insert(
        "r".into(),
        Role {
            id: "r".into(),
            name: "r".into(),
            workflow_ids: ids,
            required_auth: BTreeSet::from([AuthMethod::Password]),
        },
    );
    p.accounts.insert(
        "u".into(),
        Account {
            id: "u".into(),
            federated_name: "u".into(),
            role_ids: BTreeSet::from(["r".into()]),
            idp_id: "idp".into(),
            upstream: None,
        },
    );
    p
}

fn fresh() -> Session {
    Session::new(
        SessionId::from_bytes([1; 16]),
        UserId::from("u"),
        BTreeSet::from([AuthMethod::Password]),
        0,
        0,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn subset_tracking_matches_path_enumeration(seed: u64) {
        let case = monitor_case(&mut StdRng::seed_from_u64(seed));
        let policy = policy_with(vec![case.workflow.clone()]);
        let host = Table::snapshot(&case.tables);
        let mut s = fresh();
        let got: Vec<bool> = case
            .requests
            .iter()
            .enumerate()
            .map(|(i, r)| evaluate(&mut s, r, &policy, &host, None, i as i64).is_allow())
            .collect();
        prop_assert_eq!(&got, &single_workflow_verdicts(&case.workflow, &case.requests, &case.tables));
        prop_assert_eq!(
            got.iter().all(|a| *a),
            path_exists(&case.workflow, &case.requests, &case.tables)
        );
    }

    #[test]
    fn deny_leaves_session_untouched(seed: u64) {
        let case = monitor_case(&mut StdRng::seed_from_u64(seed));
        let policy = policy_with(vec![case.workflow.clone()]);
        let host = Table::snapshot(&case.tables);
        let mut s = fresh();
        for r in &case.requests {
            let before = s.snapshot();
            if let Decision::Deny { .. } = evaluate(&mut s, r, &policy, &host, None, 5) {
                prop_assert_eq!(before, s.snapshot());
            }
        }
    }

    #[test]
    fn substituted_page_denies_at_that_step(n in 1usize..7, k_pick: usize, sub_pick: usize) {
        let pages: Vec<PageId> = (0..n).map(|i| PageId::get(&format!("/p{i}"))).collect();
        let wf = linear_workflow("w", &pages);
        let policy = policy_with(vec![wf]);
        let k = k_pick % n;
        let candidates: Vec<PageId> = pages
            .iter()
            .filter(|p| **p != pages[k])
            .cloned()
            .chain([PageId::get("/elsewhere"), PageId::post(pages[k].path())])
            .collect();
        let mut seq = pages.clone();
        seq[k] = candidates[sub_pick % candidates.len()].clone();
        let mut s = fresh();
        for (i, page) in seq.iter().enumerate().take(k + 1) {
            let d = evaluate(&mut s, &MonitorRequest::new(page.clone()), &policy, &TableSnapshot::default(), None, 0);
            prop_assert_eq!(d.is_allow(), i < k, "step {}", i);
        }
    }

    #[test]
    fn exclusion_once_true_stays_true(seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let pool = [PageId::get("/a"), PageId::get("/b"), PageId::post("/c")];
        let wfs: Vec<Workflow> = (0..3)
            .map(|i| {
                let pages: Vec<PageId> = (0..rng.random_range(1..4))
                    .map(|_| pool.choose(&mut rng).unwrap().clone())
                    .collect();
                linear_workflow(&format!("w{i}"), &pages)
            })
            .collect();
        let mut policy = policy_with(wfs);
        policy.exclusions.insert(
            "x".into(),
            ExclusionSet { id: "x".into(), workflow_ids: BTreeSet::from(["w0".into(), "w1".into()]) },
        );
        let ids: Vec<WorkflowId> = policy.workflows.keys().cloned().collect();
        let mut s = fresh();
        let mut seen: BTreeSet<WorkflowId> = BTreeSet::new();
        for _ in 0..8 {
            let r = MonitorRequest::new(pool.choose(&mut rng).unwrap().clone());
            evaluate(&mut s, &r, &policy, &TableSnapshot::default(), None, 0);
            for w in &ids {
                if apply_exclusion(&s, w, &policy) {
                    seen.insert(w.clone());
                } else {
                    prop_assert!(!seen.contains(w), "exclusion for {} lifted", w);
                }
            }
        }
    }
}
