//! The workflow gateway server: reverse proxy, sign-on endpoints, presence
//! sweeper, admin API and an embedded identity provider.

pub mod admin;
pub mod cli;
pub mod config;
pub mod endpoints;
pub mod html;
pub mod idp;
pub mod proxy;
pub mod state;
pub mod toy;

use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::Router;
use gate_core::federation::CircleOfTrust;
use gate_core::presence::sweep;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use config::GatewayConfig;
pub use state::{Gateway, Overrides};

/// Everything the gateway listener serves.
pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .merge(endpoints::routes())
        .merge(admin::routes(gw.clone()))
        .fallback(proxy::intercept)
        .with_state(gw)
}

/// An identity provider trusting this gateway, sharing its identity records.
pub fn idp_for(gw: &Gateway) -> anyhow::Result<Arc<idp::Idp>> {
    let mut cot = CircleOfTrust::new(&gw.config.idp.idp_id);
    cot.add_sp(
        &gw.config.sp_id,
        gw.config.key()?,
        &gw.config.sso_return_url(),
    )?;
    Ok(Arc::new(idp::Idp {
        cot,
        idb: gw.policy.identities(),
        clock: gw.clock.clone(),
        assertion_ttl: gw.config.idp.assertion_ttl,
    }))
}

/// Runs the presence sweep every `presence.period` seconds.
pub fn spawn_sweeper(gw: Arc<Gateway>) -> JoinHandle<()> {
    tokio::spawn(async move {
        let period = Duration::from_secs(gw.config.presence.period.max(1) as u64);
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            for (id, reason) in sweep(&gw.sessions, &gw.audit, gw.now(), &gw.config.presence).await
            {
                tracing::info!(session = %id.prefix(), reason = reason.as_str(), "session terminated");
            }
        }
    })
}

/// Binds all listeners and serves until one of them fails.
pub async fn serve(config: GatewayConfig) -> anyhow::Result<()> {
    let gw = Gateway::new(config, Overrides::default())?;
    if gw.admin_token.is_none() {
        tracing::warn!("no admin token configured; the admin API answers 503");
    }
    let gate = TcpListener::bind(gw.config.listen)
        .await
        .with_context(|| format!("binding {}", gw.config.listen))?;
    tracing::info!(addr = %gw.config.listen, upstream = %gw.config.upstream_origin, "gateway listening");
    let mut tasks = vec![spawn_sweeper(gw.clone())];
    if gw.config.idp.enabled {
        let l = TcpListener::bind(gw.config.idp.listen)
            .await
            .with_context(|| format!("binding {}", gw.config.idp.listen))?;
        tracing::info!(addr = %gw.config.idp.listen, "identity provider listening");
        let app = idp::router(idp_for(&gw)?);
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(l, app).await {
                tracing::error!(error = %e, "identity provider stopped");
            }
        }));
    }
    let app = router(gw);
    let result = axum::serve(gate, app).await;
    for t in tasks {
        t.abort();
    }
    result.context("gateway listener")
}
