mod common;

use common::*;
use gate_core::model::AuthMethod;
use gate_core::store::AuditDecision;

#[tokio::test]
async fn round_trip_resumes_the_original_target() {
    let h = start().await;
    let mut b = h.browser();
    let r = b
        .sign_in("/search?q=lamp", "carl", &password("carl"), None)
        .await;
    let statuses: Vec<u16> = r.steps.iter().map(|s| s.status).collect();
    assert_eq!(statuses, [302, 200, 302, 302, 403]);
    // the resumed target is checked like any other request
    assert_eq!(r.final_reply().deny_reason(), Some("NoSuccessor"));
    let landed = &r.steps[3];
    assert_eq!(
        landed.location.as_deref(),
        Some(format!("{}/search?q=lamp", h.base).as_str())
    );

    let s = h.session(&b).await;
    assert_eq!(s.user_id.as_str(), "carl");
    assert_eq!(s.methods, [AuthMethod::Password].into());
    assert_eq!(s.assertion_issued_at, T0);
    let kinds: Vec<AuditDecision> = h.gw.audit.tail(10).iter().map(|r| r.decision).collect();
    assert_eq!(
        kinds,
        [
            AuditDecision::SsoIssued,
            AuditDecision::Login,
            AuditDecision::Deny
        ]
    );
}

#[tokio::test]
async fn token_role_needs_the_token() {
    let h = start().await;
    let mut b = h.browser();
    let r = b.sign_in("/", "vera", &password("vera"), None).await;
    let last = r.final_reply();
    assert_eq!(last.status, 403);
    assert!(
        last.body
            .contains("gate:sso-rejected reason=InsufficientAuthMethods"),
        "{}",
        last.body
    );
    assert!(b.sid.is_none());
    assert_eq!(h.gw.sessions.len(), 0);

    let (b, _) = h.sign_in("vera", Some(TOKEN), "/").await;
    let s = h.session(&b).await;
    assert_eq!(s.methods, [AuthMethod::Password, AuthMethod::Token].into());
}

#[tokio::test]
async fn wrong_credentials_never_open_a_session() {
    let h = start().await;
    for (user, pw) in [("carl", "nope"), ("nobody", "x")] {
        let mut b = h.browser();
        let r = b.sign_in("/", user, pw, None).await;
        assert_eq!(r.final_reply().status, 401, "{user}");
        assert!(r.final_reply().body.contains("id=\"idp-error\""));
    }
    // a wrong token proves only the password
    let mut b = h.browser();
    let r = b
        .sign_in("/", "vera", "vera-pw", Some(("10", "0000")))
        .await;
    assert!(r
        .final_reply()
        .body
        .contains("reason=InsufficientAuthMethods"));
    assert_eq!(h.gw.sessions.len(), 0);
}

#[tokio::test]
async fn tampered_and_replayed_assertions_are_rejected() {
    let h = start().await;
    let mut b = h.browser();
    let to_idp = b.get("/").await;
    let resume = to_idp.location_param("resume").unwrap();
    let back = b
        .post(
            &format!("{}/idp/login", h.idp_base),
            &[
                ("user", "carl"),
                ("password", "carl-pw"),
                ("sp", "gate"),
                ("resume", &resume),
            ],
        )
        .await;
    let url = back.location.clone().unwrap();
    let assertion = back.location_param("assertion").unwrap();

    let mut flipped = assertion.clone().into_bytes();
    let i = flipped.len() / 2;
    flipped[i] = if flipped[i] == b'A' { b'B' } else { b'A' };
    let forged = url.replace(&assertion, std::str::from_utf8(&flipped).unwrap());
    let r = b.get(&forged).await;
    assert_eq!(r.status, 403);
    assert!(r.body.contains("reason=BadSignature"), "{}", r.body);

    assert_eq!(b.get(&url).await.status, 302);
    let again = b.get(&url).await;
    assert_eq!(again.status, 403);
    assert!(again.body.contains("reason=Replayed"), "{}", again.body);
    let rejected =
        h.gw.audit
            .tail(10)
            .into_iter()
            .filter(|r| r.decision == AuditDecision::SsoRejected)
            .count();
    assert_eq!(rejected, 2);
}

#[tokio::test]
async fn stale_assertion_is_rejected_on_return() {
    let h = start().await;
    let mut b = h.browser();
    let to_idp = b.get("/").await;
    let resume = to_idp.location_param("resume").unwrap();
    let back = b
        .post(
            &format!("{}/idp/login", h.idp_base),
            &[
                ("user", "carl"),
                ("password", "carl-pw"),
                ("sp", "gate"),
                ("resume", &resume),
            ],
        )
        .await;
    h.clock.advance(h.gw.config.idp.assertion_ttl);
    let r = b.get(back.location.as_deref().unwrap()).await;
    assert!(r.body.contains("reason=Expired"), "{}", r.body);
}

#[tokio::test]
async fn unknown_service_provider_is_refused() {
    let h = start().await;
    let mut b = h.browser();
    let r = b
        .get(&format!("{}/idp/login?sp=evil&resume=x", h.idp_base))
        .await;
    assert_eq!(r.status, 400);
}

#[tokio::test]
async fn logout_ends_the_session() {
    let h = start().await;
    let (mut b, _) = h.sign_in("carl", None, "/").await;
    let sid = b.sid.clone();
    let r = b.get("/__gate/logout").await;
    assert_eq!(r.status, 200);
    assert!(b.sid.is_none());
    b.sid = sid;
    assert_eq!(b.get("/search?q=a").await.status, 302);
    assert!(h
        .gw
        .audit
        .tail(10)
        .iter()
        .any(|r| r.decision == AuditDecision::Logout));
}

#[tokio::test]
async fn application_login_failure_blocks_the_session() {
    let mut db = shop_db();
    let carl = db
        .policy
        .accounts
        .get_mut(&gate_core::model::UserId::from("carl"))
        .unwrap();
    carl.upstream.as_mut().unwrap().secret = "stale".into();
    let h = start_with(db, |_| {}).await;
    let mut b = h.browser();
    let r = b.sign_in("/", "carl", &password("carl"), None).await;
    assert!(r.final_reply().body.contains("reason=UpstreamLoginFailed"));
    assert_eq!(h.gw.sessions.len(), 0);
}
