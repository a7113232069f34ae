//! Gateway-internal endpoints under `/__gate`.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Form, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use gate_core::federation::complete_sso;
use gate_core::presence::{heartbeat, heartbeat_event, terminate};
use gate_core::session::{Session, SessionId, TerminationReason};
use gate_core::store::{AuditDecision, AuditEvent};
use serde::Deserialize;

use crate::html::{beacon_script, escape, page, BEACON_PATH};
use crate::proxy::{session_cookie, upstream_login};
use crate::state::{Gateway, LEASE_TIMEOUT};

pub fn routes() -> Router<Arc<Gateway>> {
    Router::new()
        .route("/__gate/sso/return", get(sso_return))
        .route("/__gate/beacon", post(beacon))
        .route(BEACON_PATH, get(beacon_js))
        .route("/__gate/logout", get(logout).post(logout))
}

fn html(status: StatusCode, body: String) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        body,
    )
        .into_response()
}

fn rejected(reason: &str, detail: &str) -> Response {
    html(
        StatusCode::FORBIDDEN,
        page(
            "Sign-on rejected",
            &format!(
                "<!-- gate:sso-rejected reason={r} -->\n<p>{d}</p>",
                r = escape(reason),
                d = escape(detail)
            ),
        ),
    )
}

#[derive(Debug, Deserialize)]
pub struct SsoReturn {
    assertion: String,
    resume: String,
}

async fn sso_return(State(gw): State<Arc<Gateway>>, Query(q): Query<SsoReturn>) -> Response {
    let now = gw.now();
    let policy = gw.policy.policy();
    let outcome = match complete_sso(
        &gw.verifier,
        &gw.resume,
        &policy,
        &q.assertion,
        &q.resume,
        now,
    ) {
        Ok(o) => o,
        Err(e) => {
            gw.record(
                AuditEvent::new(now, AuditDecision::SsoRejected, "sso")
                    .reason(format!("{}: {e}", e.kind())),
            );
            return rejected(e.kind(), &e.to_string());
        }
    };
    let jar = match upstream_login(&gw, &outcome.user).await {
        Ok(jar) => jar,
        Err(e) => {
            gw.record(
                AuditEvent::new(now, AuditDecision::SsoRejected, "sso")
                    .user(outcome.user.as_str())
                    .reason(format!("UpstreamLoginFailed: {e}")),
            );
            return rejected("UpstreamLoginFailed", &e.to_string());
        }
    };
    let mut session = Session::new(
        SessionId::random(),
        outcome.user.clone(),
        outcome.methods.clone(),
        outcome.issued_at,
        now,
    );
    session.upstream_cookies = jar;
    let id = session.id;
    gw.sessions.insert(session);
    let methods: Vec<&str> = outcome.methods.iter().map(|m| m.as_str()).collect();
    gw.record(
        AuditEvent::new(now, AuditDecision::Login, "sso")
            .user(outcome.user.as_str())
            .session(id.prefix())
            .reason(methods.join(",")),
    );
    let location = format!("{}{}", gw.config.public_base(), outcome.target);
    Response::builder()
        .status(StatusCode::FOUND)
        .header(header::LOCATION, location)
        .header(
            header::SET_COOKIE,
            format!(
                "{}={id}; Path=/; HttpOnly; SameSite=Lax",
                gw.config.session_cookie_name
            ),
        )
        .body(Body::empty())
        .expect("valid response parts")
}

#[derive(Debug, Deserialize)]
pub struct Beacon {
    #[serde(default)]
    active: String,
    #[serde(default)]
    token: String,
}

fn flag(v: &str) -> bool {
    matches!(v.trim(), "1" | "true" | "on")
}

async fn beacon(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Form(b): Form<Beacon>,
) -> Response {
    let gone = || (StatusCode::GONE, "gone").into_response();
    let Some(id) = session_cookie(&headers, &gw.config.session_cookie_name) else {
        return gone();
    };
    let Ok(mut lease) = gw.sessions.lease(&id, LEASE_TIMEOUT).await else {
        return gone();
    };
    let now = gw.now();
    let Ok(hb) = heartbeat(
        &mut lease,
        flag(&b.active),
        flag(&b.token),
        now,
        &gw.config.presence,
    ) else {
        return gone();
    };
    if let Some(ev) = heartbeat_event(&lease, &hb, now) {
        gw.record(ev);
    }
    lease.commit();
    ([(header::CONTENT_TYPE, "text/plain")], hb.status.as_str()).into_response()
}

async fn beacon_js(State(gw): State<Arc<Gateway>>) -> Response {
    (
        [
            (header::CONTENT_TYPE, "application/javascript"),
            (header::CACHE_CONTROL, "no-store"),
        ],
        beacon_script(
            gw.config.presence.period,
            gw.config.token_probe_url.as_deref(),
        ),
    )
        .into_response()
}

async fn logout(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> Response {
    let name = &gw.config.session_cookie_name;
    if let Some(id) = session_cookie(&headers, name) {
        if let Ok(mut lease) = gw.sessions.lease(&id, LEASE_TIMEOUT).await {
            let now = gw.now();
            if terminate(&mut lease, TerminationReason::Logout, now) {
                gw.record(
                    AuditEvent::new(now, AuditDecision::Logout, "session")
                        .user(lease.user_id.as_str())
                        .session(id.prefix())
                        .reason(TerminationReason::Logout.as_str()),
                );
            }
            lease.commit();
        }
    }
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/html; charset=utf-8")
        .header(
            header::SET_COOKIE,
            format!("{name}=; Path=/; HttpOnly; Max-Age=0"),
        )
        .body(Body::from(page(
            "Signed out",
            "<p>You have been signed out.</p>",
        )))
        .expect("valid response parts")
}
