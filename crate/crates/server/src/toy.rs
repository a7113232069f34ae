//! A small web application to put behind the gateway: a login form, a
//! catalogue with search and detail pages, and a sell form.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Form, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Deserialize;

use crate::html::{escape, page};

pub const COOKIE: &str = "app_sid";
pub const LOGIN_FAILED: &str = "Login failed";

pub struct ToyApp {
    /// Absolute origin used in generated links, as real applications do.
    pub origin: String,
    users: BTreeMap<String, String>,
    sessions: Mutex<BTreeMap<String, String>>,
    hits: Mutex<BTreeMap<String, u64>>,
    sold: Mutex<Vec<(String, String, String)>>,
}

impl ToyApp {
    pub fn new(origin: &str, users: impl IntoIterator<Item = (String, String)>) -> Arc<Self> {
        Arc::new(ToyApp {
            origin: origin.trim_end_matches('/').to_string(),
            users: users.into_iter().collect(),
            sessions: Mutex::new(BTreeMap::new()),
            hits: Mutex::new(BTreeMap::new()),
            sold: Mutex::new(Vec::new()),
        })
    }

    /// Requests served per route, keyed like `GET /search`.
    pub fn hits(&self) -> BTreeMap<String, u64> {
        self.hits.lock().expect("hits").clone()
    }

    pub fn hit_count(&self, key: &str) -> u64 {
        self.hits().get(key).copied().unwrap_or(0)
    }

    /// (user, item, sku) for every completed sale.
    pub fn sales(&self) -> Vec<(String, String, String)> {
        self.sold.lock().expect("sold").clone()
    }

    fn hit(&self, key: &str) {
        *self
            .hits
            .lock()
            .expect("hits")
            .entry(key.to_string())
            .or_default() += 1;
    }

    fn user_for(&self, headers: &HeaderMap) -> Option<String> {
        let sid = headers
            .get_all(header::COOKIE)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .flat_map(|v| v.split(';'))
            .filter_map(|c| c.trim().split_once('='))
            .find(|(k, _)| *k == COOKIE)
            .map(|(_, v)| v.to_string())?;
        self.sessions.lock().expect("sessions").get(&sid).cloned()
    }
}

pub fn router(app: Arc<ToyApp>) -> Router {
    Router::new()
        .route("/login", get(login_form).post(login))
        .route("/", get(home))
        .route("/search", get(search))
        .route("/detail", get(detail))
        .route("/sell", post(sell))
        .with_state(app)
}

fn html(status: StatusCode, body: String) -> Response {
    (
        status,
        [(header::CONTENT_TYPE, "text/html; charset=utf-8")],
        body,
    )
        .into_response()
}

fn to_login() -> Response {
    Response::builder()
        .status(StatusCode::SEE_OTHER)
        .header(header::LOCATION, "/login")
        .body(Body::empty())
        .expect("valid response parts")
}

async fn login_form(State(app): State<Arc<ToyApp>>) -> Response {
    app.hit("GET /login");
    html(
        StatusCode::OK,
        page(
            "Login",
            r#"<form method="post" action="/login">
<input name="user"><input name="password" type="password">
<button>Login</button></form>"#,
        ),
    )
}

#[derive(Deserialize)]
struct Credentials {
    #[serde(default)]
    user: String,
    #[serde(default)]
    password: String,
}

async fn login(State(app): State<Arc<ToyApp>>, Form(c): Form<Credentials>) -> Response {
    app.hit("POST /login");
    if app.users.get(&c.user) != Some(&c.password) {
        return html(
            StatusCode::OK,
            page("Login", &format!("<p>{LOGIN_FAILED}</p>")),
        );
    }
    let sid = hex::encode(rand::random::<[u8; 16]>());
    app.sessions
        .lock()
        .expect("sessions")
        .insert(sid.clone(), c.user);
    Response::builder()
        .status(StatusCode::SEE_OTHER)
        .header(header::LOCATION, format!("{}/", app.origin))
        .header(
            header::SET_COOKIE,
            format!("{COOKIE}={sid}; Path=/; HttpOnly"),
        )
        .body(Body::empty())
        .expect("valid response parts")
}

async fn home(State(app): State<Arc<ToyApp>>, headers: HeaderMap) -> Response {
    app.hit("GET /");
    let Some(user) = app.user_for(&headers) else {
        return to_login();
    };
    html(
        StatusCode::OK,
        page(
            "Catalogue",
            &format!(
                r#"<p id="who">Signed in as {u}</p>
<form action="{o}/search"><input name="q"><button>Search</button></form>"#,
                u = escape(&user),
                o = app.origin
            ),
        ),
    )
}

#[derive(Deserialize)]
struct SearchQuery {
    #[serde(default)]
    q: String,
}

async fn search(
    State(app): State<Arc<ToyApp>>,
    headers: HeaderMap,
    Query(q): Query<SearchQuery>,
) -> Response {
    app.hit("GET /search");
    if app.user_for(&headers).is_none() {
        return to_login();
    }
    html(
        StatusCode::OK,
        page(
            "Results",
            &format!(
                r#"<p>Results for {q}</p>
<a href="{o}/detail?id=1">Item 1</a> <a href="/detail?id=2">Item 2</a>"#,
                q = escape(&q.q),
                o = app.origin
            ),
        ),
    )
}

#[derive(Deserialize)]
struct DetailQuery {
    #[serde(default)]
    id: String,
}

async fn detail(
    State(app): State<Arc<ToyApp>>,
    headers: HeaderMap,
    Query(q): Query<DetailQuery>,
) -> Response {
    app.hit("GET /detail");
    if app.user_for(&headers).is_none() {
        return to_login();
    }
    html(
        StatusCode::OK,
        page(
            "Detail",
            &format!(
                r#"<p>Item {id}</p>
<form method="post" action="/sell"><input name="item" value="{id}"><input name="sku"><button>Sell</button></form>"#,
                id = escape(&q.id)
            ),
        ),
    )
}

#[derive(Deserialize)]
struct Sale {
    #[serde(default)]
    item: String,
    #[serde(default)]
    sku: String,
}

async fn sell(State(app): State<Arc<ToyApp>>, headers: HeaderMap, Form(s): Form<Sale>) -> Response {
    app.hit("POST /sell");
    let Some(user) = app.user_for(&headers) else {
        return to_login();
    };
    app.sold
        .lock()
        .expect("sold")
        .push((user, s.item.clone(), s.sku.clone()));
    html(
        StatusCode::OK,
        page(
            "Sold",
            &format!("<p id=\"sold\">Sold item {}</p>", escape(&s.item)),
        ),
    )
}
