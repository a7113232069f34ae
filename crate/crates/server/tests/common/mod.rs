//! A gateway, its identity provider and the toy application on ephemeral
//! ports, driven by a simulated clock, plus a scripted browser.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use gate_core::clock::ManualClock;
use gate_core::credentials::PasswordHash;
use gate_core::model::{
    AuthMethod, GateDb, Policy, Role, StateId, TokenBinding, Transition, UpstreamCredentials, User,
    UserId, Workflow, WorkflowId,
};
use gate_core::page::PageId;
use gate_core::rule::{ParamRule, SetQueryDef};
use gate_core::session::{Session, SessionId};
use gate_core::store::PolicyStore;
use gate_server::config::UpstreamLogin;
use gate_server::toy::{self, ToyApp};
use gate_server::{idp_for, router, Gateway, GatewayConfig, Overrides};
use reqwest::header::{HeaderMap, COOKIE, LOCATION, SET_COOKIE};
use reqwest::{Method, StatusCode};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub const T0: i64 = 1_700_000_000;
pub const ADMIN_TOKEN: &str = "test-admin-token-0123456789";
pub const KEY_HEX: &str = "4242424242424242424242424242424242424242424242424242424242424242";
pub const STOCK_HEADER: &str = "sku\tin_stock\n";

/// Users of the standard fixture: (name, roles, token).
pub const USERS: &[(&str, &[&str], bool)] = &[
    ("carl", &["clerk"], false),
    ("vera", &["clerk", "secure"], true),
    ("tina", &["trainer"], false),
    ("rita", &["replayer"], false),
];
pub const TOKEN: (&str, &str) = ("10", "4711");

pub fn password(user: &str) -> String {
    format!("{user}-pw")
}

pub fn app_secret(user: &str) -> String {
    format!("app-{user}")
}

fn t(id: u32, from: &str, to: &str, page: PageId, params: &[(&str, ParamRule)]) -> Transition {
    Transition {
        id,
        from: StateId::from(from),
        to: StateId::from(to),
        page,
        params: params
            .iter()
            .map(|(n, r)| (n.to_string(), r.clone()))
            .collect(),
    }
}

/// `shop`: home, search, detail, then sell guarded by the stock table.
pub fn shop_workflow() -> Workflow {
    let in_stock =
        ParamRule::set_query(SetQueryDef::new("stock", "sku").filter_value("in_stock", "yes"))
            .unwrap();
    Workflow {
        id: WorkflowId::from("shop"),
        name: "Sell an item".into(),
        states: ["s0", "s1", "s2", "s3", "s4"]
            .into_iter()
            .map(StateId::from)
            .collect(),
        start_state: "s0".into(),
        start_page: PageId::get("/"),
        transitions: vec![
            t(1, "s0", "s1", PageId::get("/"), &[]),
            t(
                2,
                "s1",
                "s2",
                PageId::get("/search"),
                &[("q", ParamRule::regex("[a-z ]{1,20}").unwrap())],
            ),
            t(
                3,
                "s2",
                "s3",
                PageId::get("/detail"),
                &[("id", ParamRule::regex("[0-9]+").unwrap())],
            ),
            t(
                4,
                "s3",
                "s4",
                PageId::post("/sell"),
                &[
                    ("item", ParamRule::regex("[0-9]+").unwrap()),
                    ("sku", in_stock),
                ],
            ),
        ],
    }
}

fn role(id: &str, wfs: &[&str], auth: &[AuthMethod]) -> Role {
    Role {
        id: id.into(),
        name: id.into(),
        workflow_ids: wfs.iter().map(|w| WorkflowId::from(*w)).collect(),
        required_auth: auth.iter().copied().collect(),
    }
}

/// The standard database: clerks run `shop`; `secure` adds a token
/// requirement; trainers and replayers start with no workflows.
pub fn shop_db() -> GateDb {
    let mut p = Policy::default();
    let wf = shop_workflow();
    p.workflows.insert(wf.id.clone(), wf);
    for r in [
        role("clerk", &["shop"], &[AuthMethod::Password]),
        role("secure", &[], &[AuthMethod::Password, AuthMethod::Token]),
        role("trainer", &[], &[AuthMethod::Password]),
        role("replayer", &[], &[AuthMethod::Password]),
    ] {
        p.roles.insert(r.id.clone(), r);
    }
    let mut db = GateDb {
        policy: p,
        ..GateDb::default()
    };
    for (name, roles, token) in USERS {
        db.upsert_user(User {
            id: UserId::from(*name),
            federated_name: name.to_string(),
            role_ids: roles.iter().map(|r| (*r).into()).collect(),
            idp_id: "idp".into(),
            password: PasswordHash::with_salt(&password(name), name.as_bytes().to_vec()),
            token_binding: token.then(|| TokenBinding {
                firm_code: TOKEN.0.into(),
                user_code: TOKEN.1.into(),
            }),
            upstream_credentials: Some(UpstreamCredentials {
                username: name.to_string(),
                secret: app_secret(name),
            }),
        });
    }
    db
}

pub struct Harness {
    pub gw: Arc<Gateway>,
    pub toy: Arc<ToyApp>,
    pub clock: ManualClock,
    pub base: String,
    pub idp_base: String,
    pub toy_base: String,
    pub dir: tempfile::TempDir,
    tasks: Vec<JoinHandle<()>>,
}

impl Drop for Harness {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

fn spawn(l: TcpListener, app: axum::Router) -> JoinHandle<()> {
    tokio::spawn(async move {
        axum::serve(l, app).await.expect("server runs");
    })
}

pub async fn start() -> Harness {
    start_with(shop_db(), |_| {}).await
}

pub async fn start_with(db: GateDb, tweak: impl FnOnce(&mut GatewayConfig)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let oracle_dir = dir.path().join("oracle");
    std::fs::create_dir_all(&oracle_dir).unwrap();
    std::fs::write(
        oracle_dir.join("stock.tsv"),
        format!("{STOCK_HEADER}A-7\tyes\nB-2\tno\n"),
    )
    .unwrap();

    let toy_l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let toy_base = format!("http://{}", toy_l.local_addr().unwrap());
    let toy = ToyApp::new(
        &toy_base,
        USERS.iter().map(|(u, _, _)| (u.to_string(), app_secret(u))),
    );
    let mut tasks = vec![spawn(toy_l, toy::router(toy.clone()))];

    let gate_l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let idp_l = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let mut cfg = GatewayConfig {
        listen: gate_l.local_addr().unwrap(),
        upstream_origin: toy_base.parse().unwrap(),
        shared_key: KEY_HEX.into(),
        oracle_dir: Some(oracle_dir),
        upstream_login: Some(UpstreamLogin {
            login_page: PageId::post("/login"),
            user_field: "user".into(),
            secret_field: "password".into(),
            failure_marker: Some(toy::LOGIN_FAILED.into()),
        }),
        ..GatewayConfig::default()
    };
    cfg.idp.listen = idp_l.local_addr().unwrap();
    tweak(&mut cfg);

    let clock = ManualClock::new(T0);
    let gw = Gateway::new(
        cfg,
        Overrides {
            clock: Some(Arc::new(clock.clone())),
            policy: Some(Arc::new(PolicyStore::in_memory(db).unwrap())),
            admin_token: Some(ADMIN_TOKEN.into()),
            ..Overrides::default()
        },
    )
    .unwrap();
    tasks.push(spawn(
        idp_l,
        gate_server::idp::router(idp_for(&gw).unwrap()),
    ));
    let base = format!("http://{}", gw.config.listen);
    let idp_base = format!("http://{}", gw.config.idp.listen);
    tasks.push(spawn(gate_l, router(gw.clone())));
    Harness {
        gw,
        toy,
        clock,
        base,
        idp_base,
        toy_base,
        dir,
        tasks,
    }
}

impl Harness {
    pub fn browser(&self) -> Browser {
        Browser::new(&self.base)
    }

    pub fn oracle_file(&self) -> PathBuf {
        self.dir.path().join("oracle").join("stock.tsv")
    }

    /// Rewrites the stock fixture: (sku, in stock).
    pub fn set_stock(&self, rows: &[(&str, bool)]) {
        let mut text = STOCK_HEADER.to_string();
        for (sku, ok) in rows {
            text.push_str(&format!("{sku}\t{}\n", if *ok { "yes" } else { "no" }));
        }
        std::fs::write(self.oracle_file(), text).unwrap();
    }

    pub async fn session(&self, b: &Browser) -> Session {
        let id: SessionId = b.sid.as_deref().expect("signed in").parse().unwrap();
        self.gw
            .sessions
            .get(&id, std::time::Duration::from_secs(1))
            .await
            .unwrap()
    }

    pub fn admin(&self) -> Admin {
        Admin {
            base: format!("{}/admin/api/v1", self.base),
            token: ADMIN_TOKEN.to_string(),
            http: reqwest::Client::new(),
        }
    }

    /// Signs `user` in with password (and token when given) and lands on `target`.
    pub async fn sign_in(
        &self,
        user: &str,
        token: Option<(&str, &str)>,
        target: &str,
    ) -> (Browser, Reply) {
        let mut b = self.browser();
        let r = b.sign_in(target, user, &password(user), token).await;
        assert_eq!(
            r.final_reply().status,
            200,
            "sign-in of {user} failed: {:?}",
            r.steps
        );
        let last = r.final_reply().clone();
        (b, last)
    }
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub location: Option<String>,
    pub headers: HeaderMap,
    pub body: String,
}

impl Reply {
    pub fn denied(&self) -> bool {
        self.status == 403 && self.body.contains("<!-- gate:deny reason=")
    }

    pub fn deny_reason(&self) -> Option<&str> {
        let rest = self.body.split("<!-- gate:deny reason=").nth(1)?;
        rest.split(' ').next()
    }

    /// Query parameter of the redirect target.
    pub fn location_param(&self, name: &str) -> Option<String> {
        let loc = url::Url::parse(self.location.as_deref()?).ok()?;
        loc.query_pairs()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    }
}

#[derive(Debug)]
pub struct SignIn {
    pub steps: Vec<Reply>,
}

impl SignIn {
    pub fn final_reply(&self) -> &Reply {
        self.steps.last().expect("at least one step")
    }
}

/// A cookie-aware client that keeps only the gateway session cookie, the
/// only cookie a browser behind the gateway ever receives.
pub struct Browser {
    pub base: String,
    pub sid: Option<String>,
    pub seen_cookies: BTreeSet<String>,
    http: reqwest::Client,
}

impl Browser {
    pub fn new(base: &str) -> Self {
        Browser {
            base: base.to_string(),
            sid: None,
            seen_cookies: BTreeSet::new(),
            http: reqwest::Client::builder()
                .redirect(reqwest::redirect::Policy::none())
                .build()
                .unwrap(),
        }
    }

    fn absolute(&self, target: &str) -> String {
        if target.starts_with("http://") || target.starts_with("https://") {
            target.to_string()
        } else {
            format!("{}{target}", self.base)
        }
    }

    pub async fn send(
        &mut self,
        method: Method,
        target: &str,
        form: Option<&[(&str, &str)]>,
    ) -> Reply {
        let url = self.absolute(target);
        let mut req = self.http.request(method, &url);
        if url.starts_with(&self.base) {
            if let Some(sid) = &self.sid {
                req = req.header(COOKIE, format!("gate_sid={sid}"));
            }
        }
        if let Some(form) = form {
            let body = url::form_urlencoded::Serializer::new(String::new())
                .extend_pairs(form.iter())
                .finish();
            req = req
                .header("content-type", "application/x-www-form-urlencoded")
                .body(body);
        }
        let resp = req.send().await.expect("request completes");
        let status = resp.status().as_u16();
        let headers = resp.headers().clone();
        if url.starts_with(&self.base) {
            for c in headers.get_all(SET_COOKIE) {
                let c = c.to_str().unwrap();
                let (name, rest) = c.split_once('=').unwrap();
                self.seen_cookies.insert(name.to_string());
                if name == "gate_sid" {
                    let value = rest.split(';').next().unwrap();
                    self.sid =
                        (!value.is_empty() && !c.contains("Max-Age=0")).then(|| value.to_string());
                }
            }
        }
        let location = headers
            .get(LOCATION)
            .map(|l| l.to_str().unwrap().to_string())
            .map(|l| {
                if l.starts_with('/') {
                    format!("{}{l}", self.base)
                } else {
                    l
                }
            });
        Reply {
            status,
            location,
            headers,
            body: resp.text().await.unwrap_or_default(),
        }
    }

    pub async fn get(&mut self, target: &str) -> Reply {
        self.send(Method::GET, target, None).await
    }

    pub async fn post(&mut self, target: &str, form: &[(&str, &str)]) -> Reply {
        self.send(Method::POST, target, Some(form)).await
    }

    /// Requests `target`, follows the gateway to the identity provider,
    /// submits the login form, and follows the way back. Stops at the first
    /// reply that does not continue the dance.
    pub async fn sign_in(
        &mut self,
        target: &str,
        user: &str,
        password: &str,
        token: Option<(&str, &str)>,
    ) -> SignIn {
        let mut steps = vec![self.get(target).await];
        let to_idp = steps.last().unwrap().clone();
        if to_idp.status != 302 {
            return SignIn { steps };
        }
        let login_url = to_idp.location.clone().unwrap();
        let form = self.get(&login_url).await;
        steps.push(form);
        let sp = to_idp.location_param("sp").unwrap_or_default();
        let resume = to_idp.location_param("resume").unwrap_or_default();
        let (firm, code) = token.unwrap_or(("", ""));
        let post_url = login_url.split('?').next().unwrap().to_string();
        let back = self
            .post(
                &post_url,
                &[
                    ("user", user),
                    ("password", password),
                    ("firmcode", firm),
                    ("usercode", code),
                    ("sp", &sp),
                    ("resume", &resume),
                ],
            )
            .await;
        steps.push(back.clone());
        if back.status != 302 {
            return SignIn { steps };
        }
        let landed = self.get(back.location.as_deref().unwrap()).await;
        steps.push(landed.clone());
        if landed.status != 302 {
            return SignIn { steps };
        }
        let page = self.get(landed.location.as_deref().unwrap()).await;
        steps.push(page);
        SignIn { steps }
    }

    pub async fn beacon(&mut self, active: bool, token: bool) -> Reply {
        let a = if active { "1" } else { "0" };
        let t = if token { "1" } else { "0" };
        self.post("/__gate/beacon", &[("active", a), ("token", t)])
            .await
    }
}

/// Admin API client that reports status codes instead of failing on them.
pub struct Admin {
    pub base: String,
    pub token: String,
    http: reqwest::Client,
}

impl Admin {
    pub fn with_token(mut self, token: &str) -> Self {
        self.token = token.to_string();
        self
    }

    pub async fn call(
        &self,
        method: Method,
        path: &str,
        body: Option<serde_json::Value>,
    ) -> (StatusCode, serde_json::Value) {
        let mut req = self
            .http
            .request(method, format!("{}{path}", self.base))
            .bearer_auth(&self.token);
        if let Some(b) = body {
            req = req
                .header("content-type", "application/json")
                .body(b.to_string());
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        let json = serde_json::from_str(&text).unwrap_or(serde_json::Value::String(text));
        (status, json)
    }

    pub async fn get(&self, path: &str) -> (StatusCode, serde_json::Value) {
        self.call(Method::GET, path, None).await
    }

    pub async fn post(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> (StatusCode, serde_json::Value) {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn put(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> (StatusCode, serde_json::Value) {
        self.call(Method::PUT, path, Some(body)).await
    }

    pub async fn delete(&self, path: &str) -> (StatusCode, serde_json::Value) {
        self.call(Method::DELETE, path, None).await
    }

    pub async fn raw(&self, method: Method, path: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let resp = self
            .http
            .request(method, format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .body(body)
            .send()
            .await
            .unwrap();
        (resp.status(), resp.bytes().await.unwrap().to_vec())
    }
}

/// What the client does at one tick: `None` sends no beacon, otherwise
/// `(active, token)`.
pub type Tick = Option<(bool, bool)>;

impl Harness {
    /// Every `period` seconds from the current instant: advance the clock,
    /// let the browser act, then sweep. Returns the instant and reason of the
    /// browser's session ending, or `None` after `max_ticks`.
    pub async fn drive_presence(
        &self,
        b: &mut Browser,
        max_ticks: usize,
        mut act: impl FnMut(i64) -> Tick,
    ) -> Option<(i64, gate_core::session::TerminationReason)> {
        let cfg = self.gw.config.presence;
        let mine = self.session(b).await.id;
        for _ in 0..max_ticks {
            let now = self.clock.advance(cfg.period);
            if let Some((active, token)) = act(now) {
                let r = b.beacon(active, token).await;
                assert_eq!(r.status, 200, "beacon at {now}: {r:?}");
            }
            let ended =
                gate_core::presence::sweep(&self.gw.sessions, &self.gw.audit, now, &cfg).await;
            if let Some((_, reason)) = ended.into_iter().find(|(id, _)| *id == mine) {
                return Some((now, reason));
            }
        }
        None
    }
}

impl Harness {
    pub fn clock_now(&self) -> i64 {
        use gate_core::clock::Clock;
        self.clock.now()
    }
}
