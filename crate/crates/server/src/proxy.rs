//! The interception pipeline for requests bound for the host application:
//! session check, reference monitor, forwarding, rewriting, audit.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Request, State};
use axum::http::header::{self, HeaderMap, HeaderName, HeaderValue};
use axum::http::{Method as HttpMethod, StatusCode};
use axum::response::{IntoResponse, Response};
use gate_core::model::UserId;
use gate_core::monitor::{evaluate, Decision, MonitorRequest};
use gate_core::page::{is_gateway_internal, Method, PageId};
use gate_core::presence::record_activity;
use gate_core::rule::Params;
use gate_core::session::SessionId;
use gate_core::store::{AuditDecision, AuditEvent, SessionLease};

use crate::config::GatewayConfig;
use crate::html::{deny_page, is_html, page, rewrite_html};
use crate::state::{Gateway, LEASE_TIMEOUT};

pub const MAX_BODY: usize = 4 * 1024 * 1024;

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

fn html_response(status: StatusCode, body: String) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        body,
    )
        .into_response()
}

/// Query and form-encoded body parameters, merged.
pub fn request_params(query: Option<&str>, content_type: Option<&str>, body: &[u8]) -> Params {
    let mut params = Params::new();
    let mut add = |pairs: url::form_urlencoded::Parse<'_>| {
        for (k, v) in pairs {
            params
                .entry(k.into_owned())
                .or_default()
                .push(v.into_owned());
        }
    };
    if let Some(q) = query {
        add(url::form_urlencoded::parse(q.as_bytes()));
    }
    let is_form = content_type.is_some_and(|ct| {
        ct.trim_start()
            .to_ascii_lowercase()
            .starts_with("application/x-www-form-urlencoded")
    });
    if is_form {
        add(url::form_urlencoded::parse(body));
    }
    params
}

/// The gateway session id from the `Cookie` header, if present and well formed.
pub fn session_cookie(headers: &HeaderMap, name: &str) -> Option<SessionId> {
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|c| c.trim().split_once('='))
        .find(|(k, _)| *k == name)
        .and_then(|(_, v)| v.trim().parse().ok())
}

/// Applies upstream `Set-Cookie` headers to a cookie jar.
pub fn absorb_set_cookies(
    jar: &mut BTreeMap<String, String>,
    headers: &reqwest::header::HeaderMap,
) {
    for v in headers.get_all(reqwest::header::SET_COOKIE) {
        let Ok(v) = v.to_str() else { continue };
        let mut parts = v.split(';');
        let Some((name, value)) = parts.next().and_then(|p| p.split_once('=')) else {
            continue;
        };
        let name = name.trim();
        if name.is_empty() {
            continue;
        }
        let expired = parts.any(|a| {
            let a = a.trim().to_ascii_lowercase();
            a == "max-age=0" || a.starts_with("max-age=-")
        });
        if expired {
            jar.remove(name);
        } else {
            jar.insert(name.to_string(), value.trim().to_string());
        }
    }
}

fn connection_listed(headers: &HeaderMap) -> Vec<String> {
    headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|s| s.trim().to_ascii_lowercase())
        .collect()
}

fn is_hop_by_hop(name: &str, listed: &[String]) -> bool {
    HOP_BY_HOP.contains(&name) || listed.iter().any(|l| l == name)
}

/// Rewrites an upstream `Location` to the gateway's origin.
pub fn rewrite_location(location: &str, cfg: &GatewayConfig) -> String {
    let upstream = cfg.upstream_base();
    match location.strip_prefix(&upstream) {
        Some(rest) if rest.is_empty() || rest.starts_with(['/', '?', '#']) => {
            let rest = if rest.starts_with('/') {
                rest.to_string()
            } else {
                format!("/{rest}")
            };
            format!("{}{rest}", cfg.public_base())
        }
        _ => location.to_string(),
    }
}

pub struct Forwarded {
    pub status: StatusCode,
    pub headers: reqwest::header::HeaderMap,
    pub body: Bytes,
}

/// Sends a request to the host application with the session's cookies.
pub async fn forward(
    gw: &Gateway,
    method: Method,
    target: &str,
    client_headers: &HeaderMap,
    body: Bytes,
    cookies: Option<String>,
) -> Result<Forwarded, reqwest::Error> {
    let url = format!("{}{}", gw.config.upstream_base(), target);
    let m = match method {
        Method::Get => reqwest::Method::GET,
        Method::Post => reqwest::Method::POST,
    };
    let listed = connection_listed(client_headers);
    let mut rb = gw.http.request(m, url);
    for (name, value) in client_headers {
        let n = name.as_str();
        if is_hop_by_hop(n, &listed)
            || matches!(n, "host" | "cookie" | "accept-encoding" | "content-length")
        {
            continue;
        }
        rb = rb.header(n, value.as_bytes());
    }
    rb = rb.header("accept-encoding", "identity");
    if let Some(c) = cookies {
        rb = rb.header("cookie", c);
    }
    if method == Method::Post {
        rb = rb.body(body);
    }
    let resp = rb.send().await?;
    let status = StatusCode::from_u16(resp.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
    let headers = resp.headers().clone();
    let body = resp.bytes().await?;
    Ok(Forwarded {
        status,
        headers,
        body,
    })
}

/// Client response for an upstream reply: hop-by-hop headers and
/// `Set-Cookie` removed, `Location` and HTML rewritten.
pub fn client_response(f: Forwarded, cfg: &GatewayConfig) -> Response {
    let mut listed: Vec<String> = Vec::new();
    for v in f.headers.get_all(reqwest::header::CONNECTION) {
        if let Ok(v) = v.to_str() {
            listed.extend(v.split(',').map(|s| s.trim().to_ascii_lowercase()));
        }
    }
    let content_type = f
        .headers
        .get(reqwest::header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok());
    let encoded = f
        .headers
        .get(reqwest::header::CONTENT_ENCODING)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|e| !e.eq_ignore_ascii_case("identity"));
    let body = if encoded || !is_html(content_type) {
        f.body.to_vec()
    } else {
        rewrite_html(&f.body, content_type, cfg)
    };

    let mut out = Response::new(Body::from(body));
    *out.status_mut() = f.status;
    let headers = out.headers_mut();
    for (name, value) in &f.headers {
        let n = name.as_str();
        if is_hop_by_hop(n, &listed) || n == "set-cookie" || n == "content-length" {
            continue;
        }
        let Ok(hn) = HeaderName::from_bytes(name.as_str().as_bytes()) else {
            continue;
        };
        let value = if n == "location" {
            match value.to_str() {
                Ok(loc) => HeaderValue::from_str(&rewrite_location(loc, cfg)).ok(),
                Err(_) => None,
            }
        } else {
            HeaderValue::from_bytes(value.as_bytes()).ok()
        };
        if let Some(v) = value {
            headers.append(hn, v);
        }
    }
    out
}

/// Sends the browser to the identity provider, remembering where it wanted
/// to go.
pub fn begin_sso(gw: &Gateway, page: &PageId, target: &str, user: Option<&UserId>) -> Response {
    let now = gw.now();
    let resume_target = match page.method() {
        Method::Get => target.to_string(),
        Method::Post => page.path().to_string(),
    };
    let token = gw.resume.begin(&resume_target, now);
    let mut url = gw.config.idp_login_url();
    url.query_pairs_mut()
        .append_pair("sp", &gw.config.sp_id)
        .append_pair("resume", &token);
    gw.record(
        AuditEvent::new(now, AuditDecision::SsoIssued, page.to_string())
            .user(user.map_or("-", |u| u.as_str()))
            .reason("login required"),
    );
    Response::builder()
        .status(StatusCode::FOUND)
        .header(header::LOCATION, url.as_str())
        .body(Body::empty())
        .expect("static response parts")
}

async fn valid_lease(gw: &Gateway, headers: &HeaderMap) -> Result<SessionLease, Option<UserId>> {
    let Some(id) = session_cookie(headers, &gw.config.session_cookie_name) else {
        return Err(None);
    };
    let Ok(lease) = gw.sessions.lease(&id, LEASE_TIMEOUT).await else {
        return Err(None);
    };
    let now = gw.now();
    let stale = lease.is_terminated()
        || now - lease.assertion_issued_at > gw.config.max_assertion_age
        || !gw.policy.policy().accounts.contains_key(&lease.user_id);
    if stale {
        return Err(Some(lease.user_id.clone()));
    }
    Ok(lease)
}

/// Fallback handler: everything that is not a gateway endpoint.
pub async fn intercept(State(gw): State<Arc<Gateway>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let target = parts.uri.path_and_query().map_or_else(
        || parts.uri.path().to_string(),
        |pq| pq.as_str().to_string(),
    );

    if is_gateway_internal(parts.uri.path()) {
        return html_response(
            StatusCode::NOT_FOUND,
            page("Not found", "<p>No such gateway endpoint.</p>"),
        );
    }
    let method = match parts.method {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        ref other => {
            gw.record(
                AuditEvent::new(
                    gw.now(),
                    AuditDecision::Deny,
                    format!("{other} {}", parts.uri.path()),
                )
                .reason("UnsupportedMethod"),
            );
            gw.count_decision();
            return html_response(
                StatusCode::METHOD_NOT_ALLOWED,
                page(
                    "Method not allowed",
                    "<p>Only GET and POST are supported.</p>",
                ),
            );
        }
    };
    let body = match to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(_) => {
            return html_response(StatusCode::PAYLOAD_TOO_LARGE, page("Request too large", ""));
        }
    };
    let page_id = PageId::new(method, &target);
    let content_type = parts
        .headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok());
    let params = request_params(parts.uri.query(), content_type, &body);

    let mut lease = match valid_lease(&gw, &parts.headers).await {
        Ok(l) => l,
        Err(user) => return begin_sso(&gw, &page_id, &target, user.as_ref()),
    };
    let now = gw.now();
    let user = lease.user_id.clone();
    let prefix = lease.id.prefix();
    let event = |d: AuditDecision| {
        AuditEvent::new(now, d, page_id.to_string())
            .user(user.as_str())
            .session(prefix.clone())
            .params(&params)
    };

    let recording = gw.recordings.lock().expect("recordings").active_for(&user);
    if let Some(rec) = recording {
        let captured = gw
            .recordings
            .lock()
            .expect("recordings")
            .capture_step(rec, page_id.clone(), params.clone(), now)
            .unwrap_or(false);
        record_activity(&mut lease, now);
        let cookies = lease.upstream_cookie_header();
        return match forward(&gw, method, &target, &parts.headers, body, cookies).await {
            Ok(f) => {
                absorb_set_cookies(&mut lease.upstream_cookies, &f.headers);
                lease.commit();
                gw.record(event(AuditDecision::Trained).reason(format!(
                    "recording {rec}{}",
                    if captured { "" } else { " (not captured)" }
                )));
                client_response(f, &gw.config)
            }
            Err(e) => {
                gw.record(event(AuditDecision::Trained).reason("upstream unreachable"));
                upstream_error(e)
            }
        };
    }

    let policy = gw.policy.policy();
    let request = MonitorRequest {
        page: page_id.clone(),
        params: params.clone(),
    };
    gw.count_decision();
    let decision = evaluate(
        &mut lease,
        &request,
        &policy,
        gw.oracle.as_ref(),
        gw.config.base_page.as_ref(),
        now,
    );
    match decision {
        Decision::Deny { reason, fallback } => {
            drop(lease);
            gw.record(event(AuditDecision::Deny).reason(reason.as_str()));
            let fallback = fallback.map(|p| format!("{}{}", gw.config.public_base(), p.path()));
            html_response(
                StatusCode::FORBIDDEN,
                deny_page(reason.as_str(), fallback.as_deref()),
            )
        }
        Decision::Allow {
            advanced, spawned, ..
        } => {
            record_activity(&mut lease, now);
            let summary = summarize(&advanced, &spawned);
            let cookies = lease.upstream_cookie_header();
            match forward(&gw, method, &target, &parts.headers, body, cookies).await {
                Ok(f) => {
                    absorb_set_cookies(&mut lease.upstream_cookies, &f.headers);
                    lease.commit();
                    gw.record(event(AuditDecision::Allow).reason(summary));
                    client_response(f, &gw.config)
                }
                Err(e) => {
                    // the request never reached the application, so the
                    // workflow does not advance
                    drop(lease);
                    gw.record(event(AuditDecision::Allow).reason("upstream unreachable"));
                    upstream_error(e)
                }
            }
        }
    }
}

fn summarize(
    advanced: &[(
        gate_core::model::WorkflowId,
        std::collections::BTreeSet<gate_core::model::StateId>,
    )],
    spawned: &[gate_core::model::WorkflowId],
) -> String {
    let mut parts: Vec<String> = advanced
        .iter()
        .map(|(w, states)| {
            let s: Vec<&str> = states.iter().map(|s| s.as_str()).collect();
            format!("{w}->{}", s.join("|"))
        })
        .collect();
    parts.extend(spawned.iter().map(|w| format!("spawn {w}")));
    parts.join(", ")
}

fn upstream_error(e: reqwest::Error) -> Response {
    tracing::warn!(error = %e, "upstream request failed");
    html_response(
        StatusCode::BAD_GATEWAY,
        page(
            "Application unavailable",
            "<p>The application could not be reached. Please retry.</p>",
        ),
    )
}

#[derive(Debug, thiserror::Error)]
pub enum UpstreamLoginError {
    #[error("user has no credentials for the application")]
    MissingCredentials,
    #[error("application login failed with status {0}")]
    Rejected(u16),
    #[error("application login page reported a failure")]
    FailureMarker,
    #[error("application unreachable: {0}")]
    Unreachable(#[from] reqwest::Error),
}

/// Logs into the host application on the user's behalf and returns the
/// cookies it set. Without an `upstream_login` section this is a no-op.
pub async fn upstream_login(
    gw: &Gateway,
    user: &UserId,
) -> Result<BTreeMap<String, String>, UpstreamLoginError> {
    let mut jar = BTreeMap::new();
    let Some(login) = &gw.config.upstream_login else {
        return Ok(jar);
    };
    let policy = gw.policy.policy();
    let creds = policy
        .accounts
        .get(user)
        .and_then(|a| a.upstream.clone())
        .ok_or(UpstreamLoginError::MissingCredentials)?;
    let form = url::form_urlencoded::Serializer::new(String::new())
        .append_pair(&login.user_field, &creds.username)
        .append_pair(&login.secret_field, &creds.secret)
        .finish();
    let url = format!("{}{}", gw.config.upstream_base(), login.login_page.path());
    let rb = match login.login_page.method() {
        Method::Post => gw
            .http
            .post(url)
            .header("content-type", "application/x-www-form-urlencoded")
            .body(form),
        Method::Get => gw.http.get(format!("{url}?{form}")),
    };
    let resp = rb.send().await?;
    let status = resp.status();
    if !(status.is_success() || status.is_redirection()) {
        return Err(UpstreamLoginError::Rejected(status.as_u16()));
    }
    absorb_set_cookies(&mut jar, resp.headers());
    let body = resp.bytes().await?;
    if let Some(marker) = &login.failure_marker {
        if body
            .windows(marker.len().max(1))
            .any(|w| w == marker.as_bytes())
        {
            return Err(UpstreamLoginError::FailureMarker);
        }
    }
    Ok(jar)
}
