//! The identity provider. It shares nothing with the gateway except the
//! circle-of-trust keys and the assertions it hands to browsers.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Form, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use gate_core::clock::Clock;
use gate_core::federation::{authenticate, issue_assertion, CircleOfTrust};
use gate_core::store::IdentityDb;
use serde::Deserialize;

use crate::html::{escape, page};

pub struct Idp {
    pub cot: CircleOfTrust,
    pub idb: Arc<IdentityDb>,
    pub clock: Arc<dyn Clock>,
    pub assertion_ttl: i64,
}

pub fn router(idp: Arc<Idp>) -> Router {
    Router::new()
        .route("/idp/login", get(login_form).post(login))
        .with_state(idp)
}

#[derive(Debug, Default, Deserialize)]
pub struct LoginQuery {
    #[serde(default)]
    sp: String,
    #[serde(default)]
    resume: String,
}

fn form(sp: &str, resume: &str, error: Option<&str>) -> String {
    let err = error
        .map(|e| format!("<p class=\"error\" id=\"idp-error\">{}</p>\n", escape(e)))
        .unwrap_or_default();
    page(
        "Sign in",
        &format!(
            r#"{err}<form method="post" action="/idp/login">
<input type="hidden" name="sp" value="{sp}">
<input type="hidden" name="resume" value="{resume}">
<label>User <input name="user" autocomplete="username"></label>
<label>Password <input name="password" type="password" autocomplete="current-password"></label>
<fieldset><legend>Hardware token (if required)</legend>
<label>FirmCode <input name="firmcode"></label>
<label>UserCode <input name="usercode"></label>
</fieldset>
<button type="submit">Sign in</button>
</form>"#,
            sp = escape(sp),
            resume = escape(resume),
        ),
    )
}

fn html(status: StatusCode, body: String) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        body,
    )
        .into_response()
}

async fn login_form(State(idp): State<Arc<Idp>>, Query(q): Query<LoginQuery>) -> Response {
    if idp.cot.sp(&q.sp).is_err() {
        return html(
            StatusCode::BAD_REQUEST,
            page("Unknown service", "<p>Unknown service provider.</p>"),
        );
    }
    html(StatusCode::OK, form(&q.sp, &q.resume, None))
}

#[derive(Debug, Deserialize)]
pub struct LoginForm {
    #[serde(default)]
    user: String,
    #[serde(default)]
    password: String,
    #[serde(default)]
    firmcode: String,
    #[serde(default)]
    usercode: String,
    #[serde(default)]
    sp: String,
    #[serde(default)]
    resume: String,
}

async fn login(State(idp): State<Arc<Idp>>, Form(f): Form<LoginForm>) -> Response {
    let Ok(sp) = idp.cot.sp(&f.sp) else {
        return html(
            StatusCode::BAD_REQUEST,
            page("Unknown service", "<p>Unknown service provider.</p>"),
        );
    };
    let has_token = !f.firmcode.is_empty() || !f.usercode.is_empty();
    let idb = idp.idb.clone();
    let (user, password) = (f.user.clone(), f.password.clone());
    let (firm, code) = (f.firmcode.clone(), f.usercode.clone());
    // password hashing is deliberately slow; keep it off the async workers
    let result = tokio::task::spawn_blocking(move || {
        let proof = has_token.then_some((firm.as_str(), code.as_str()));
        authenticate(&idb, &user, &password, proof)
    })
    .await;
    let Ok(Ok((_, methods))) = result else {
        tracing::info!(user = %f.user, "idp login failed");
        return html(
            StatusCode::UNAUTHORIZED,
            form(
                &f.sp,
                &f.resume,
                Some("Sign-in failed. Check user name, password and token."),
            ),
        );
    };
    let now = idp.clock.now();
    let assertion =
        match issue_assertion(&idp.cot, &f.user, &f.sp, &methods, now, idp.assertion_ttl) {
            Ok(a) => a,
            Err(e) => {
                return html(
                    StatusCode::BAD_REQUEST,
                    page("Sign-in failed", &escape(&e.to_string())),
                )
            }
        };
    let Ok(mut location) = url::Url::parse(&sp.return_url) else {
        return html(StatusCode::INTERNAL_SERVER_ERROR, page("Misconfigured", ""));
    };
    location
        .query_pairs_mut()
        .append_pair("assertion", &assertion.encode())
        .append_pair("resume", &f.resume);
    Response::builder()
        .status(StatusCode::FOUND)
        .header(header::LOCATION, location.as_str())
        .body(Body::empty())
        .expect("valid response parts")
}
