//! Gateway configuration, read from a TOML file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gate_core::federation::KEY_LEN;
use gate_core::page::PageId;
use gate_core::presence::PresenceConfig;
use serde::Deserialize;
use url::Url;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpstreamLogin {
    /// For example `POST /login`.
    pub login_page: PageId,
    pub user_field: String,
    pub secret_field: String,
    /// A response body containing this text counts as a failed login.
    #[serde(default)]
    pub failure_marker: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriteConfig {
    pub inject_beacon: bool,
    pub rewrite_origin_links: bool,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        RewriteConfig {
            inject_beacon: true,
            rewrite_origin_links: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdpConfig {
    /// Run the identity provider inside this process on its own listener.
    pub enabled: bool,
    pub listen: SocketAddr,
    pub idp_id: String,
    /// Login page the gateway redirects to. Defaults to the embedded
    /// provider's `/idp/login`.
    pub url: Option<Url>,
    /// Lifetime of issued assertions, seconds.
    pub assertion_ttl: i64,
}

impl Default for IdpConfig {
    fn default() -> Self {
        IdpConfig {
            enabled: true,
            listen: "127.0.0.1:8081".parse().expect("literal address"),
            idp_id: "idp".to_string(),
            url: None,
            assertion_ttl: 300,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    /// Origin clients use to reach the gateway. Without it, rewritten links
    /// and redirects become root-relative.
    pub public_origin: Option<Url>,
    pub upstream_origin: Url,
    pub base_page: Option<PageId>,
    /// Seconds after which an assertion no longer backs a session.
    pub max_assertion_age: i64,
    pub session_cookie_name: String,
    pub sp_id: String,
    /// Hex-encoded 32-byte key shared with the identity provider.
    pub shared_key: String,
    /// Holds `gatedb.xml` and `audit.jrnl`. Without it everything is kept
    /// in memory.
    pub data_dir: Option<PathBuf>,
    /// Directory of `<table>.tsv` files answering set-query rules.
    pub oracle_dir: Option<PathBuf>,
    /// Where the page script asks whether the hardware token is attached.
    pub token_probe_url: Option<String>,
    /// Seconds a pending sign-on may take before its resume token lapses.
    pub resume_ttl: i64,
    /// Admin bearer token; `GATE_ADMIN_TOKEN` takes precedence.
    pub admin_token: Option<String>,
    pub upstream_login: Option<UpstreamLogin>,
    pub rewrite: RewriteConfig,
    pub presence: PresenceConfig,
    pub idp: IdpConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: "127.0.0.1:8080".parse().expect("literal address"),
            public_origin: None,
            upstream_origin: Url::parse("http://127.0.0.1:9000").expect("literal url"),
            base_page: None,
            max_assertion_age: 8 * 3600,
            session_cookie_name: "gate_sid".to_string(),
            sp_id: "gate".to_string(),
            shared_key: String::new(),
            data_dir: None,
            oracle_dir: None,
            token_probe_url: None,
            resume_ttl: 600,
            admin_token: None,
            upstream_login: None,
            rewrite: RewriteConfig::default(),
            presence: PresenceConfig::default(),
            idp: IdpConfig::default(),
        }
    }
}

impl GatewayConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: GatewayConfig = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> anyhow::Result<()> {
        if self.upstream_origin.cannot_be_a_base() || self.upstream_origin.host().is_none() {
            bail!("upstream_origin must be an absolute http(s) URL");
        }
        if self.max_assertion_age <= 0 {
            bail!("max_assertion_age must be positive");
        }
        if self.idp.assertion_ttl <= 0 || self.resume_ttl <= 0 {
            bail!("assertion_ttl and resume_ttl must be positive");
        }
        let p = &self.presence;
        if [
            p.period,
            p.activity_window,
            p.inactivity_timeout,
            p.token_grace,
            p.beacon_timeout,
        ]
        .iter()
        .any(|v| *v <= 0)
        {
            bail!("presence durations must be positive");
        }
        if self.session_cookie_name.is_empty()
            || !self
                .session_cookie_name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
        {
            bail!("session_cookie_name must be a plain token");
        }
        self.key()?;
        Ok(())
    }

    pub fn key(&self) -> anyhow::Result<[u8; KEY_LEN]> {
        let bytes = hex::decode(self.shared_key.trim()).context("shared_key is not hex")?;
        bytes
            .try_into()
            .map_err(|_| anyhow::anyhow!("shared_key must be {KEY_LEN} bytes (64 hex digits)"))
    }

    /// Upstream origin without a trailing slash, e.g. `http://host:9000`.
    pub fn upstream_base(&self) -> String {
        self.upstream_origin
            .as_str()
            .trim_end_matches('/')
            .to_string()
    }

    /// Gateway origin without a trailing slash, or empty for root-relative.
    pub fn public_base(&self) -> String {
        self.public_origin
            .as_ref()
            .map(|u| u.as_str().trim_end_matches('/').to_string())
            .unwrap_or_default()
    }

    pub fn idp_login_url(&self) -> Url {
        self.idp.url.clone().unwrap_or_else(|| {
            Url::parse(&format!("http://{}/idp/login", self.idp.listen)).expect("valid url")
        })
    }

    /// Absolute gateway origin: `public_origin`, else the listen address.
    pub fn gateway_origin(&self) -> String {
        match &self.public_origin {
            Some(_) => self.public_base(),
            None => format!("http://{}", self.listen),
        }
    }

    pub fn sso_return_url(&self) -> String {
        format!("{}/__gate/sso/return", self.gateway_origin())
    }
}
